import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repdet import tensor as T
from repdet.tensor import BnParams, ConvParams, ShapeError, Tensor

from helpers import direct_conv, numeric_grad, rel_err, tape_grads


@pytest.fixture(autouse=True)
def _checked():
    with T.checked():
        yield


def t(a, **kw):
    return Tensor(np.asarray(a, np.float32), **kw)


# -- conv2d -----------------------------------------------------------------

def test_conv_all_ones_center():
    y = T.conv2d(t(np.ones((1, 1, 3, 3))), ConvParams(t(np.ones((1, 1, 3, 3))), None, 1, 1))
    assert y.data[0, 0, 1, 1] == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = t(rng.standard_normal((2, 1, 5, 6)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    y = T.conv2d(x, ConvParams(t(k), None, 1, 1))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_matches_direct_oracle_100_random():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, c, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        h, w = rng.integers(k, 7), rng.integers(k, 7)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((co, c, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32) if rng.random() < 0.5 else None
        p = ConvParams(t(wt), None if b is None else t(b), stride, pad)
        fast = T.conv2d(t(x), p).data
        ref = direct_conv(x, wt, b, stride, pad)
        worst = max(worst, float(np.max(np.abs(fast - ref))))
        np.testing.assert_allclose(T.conv2d_direct(t(x), p).data, ref, atol=1e-6)
    assert worst <= 1e-6


def test_conv_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
        T.conv2d(t(np.zeros((1, 2, 4, 4))), ConvParams(t(np.zeros((3, 3, 3, 3))), None, 1, 1))


def test_conv_rejects_non_finite_in_checked_mode():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(T.NonFiniteError):
        T.conv2d(t(x), ConvParams(t(np.ones((1, 1, 1, 1)))))


def test_stride2_output_sizes_follow_table():
    sizes, h = [], 640
    for _ in range(5):
        h = T.conv_output_size(h, 3, 2, 1)
        sizes.append(h)
    assert sizes == [320, 160, 80, 40, 20]


def test_float32_accumulation_close_to_float64():
    rng = np.random.default_rng(3)
    x = t(rng.standard_normal((2, 8, 9, 9)))
    p = ConvParams(t(rng.standard_normal((4, 8, 3, 3))), None, 2, 1)
    y64 = T.conv2d(x, p).data
    with T.accumulate(np.float32):
        y32 = T.conv2d(x, p).data
    np.testing.assert_allclose(y32, y64, atol=1e-5)


# -- batch norm -------------------------------------------------------------

def test_bn_identity_params():
    x = t(np.random.default_rng(4).standard_normal((2, 3, 4, 4)))
    y = T.batchnorm_infer(x, BnParams.identity(3, eps=0.0))
    np.testing.assert_array_equal(y.data, x.data)


def test_bn_zero_gamma_gives_beta():
    p = BnParams(t(np.zeros(2)), t([1.5, -2.0]), np.zeros(2, np.float32), np.ones(2, np.float32), 1e-5)
    y = T.batchnorm_infer(t(np.random.default_rng(5).standard_normal((1, 2, 3, 3))), p)
    assert np.all(y.data[0, 0] == 1.5) and np.all(y.data[0, 1] == -2.0)


def test_bn_matches_scalar_formula():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    g, b, m = rng.standard_normal((3, 3)).astype(np.float32)
    v = rng.random(3).astype(np.float32) + 0.1
    y = T.batchnorm_infer(t(x), BnParams(t(g), t(b), m, v, 1e-3)).data
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    ref = g[c] * (x[n, c, i, j] - m[c]) / np.sqrt(v[c] + 1e-3) + b[c]
                    assert abs(y[n, c, i, j] - ref) <= 1e-6


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        T.batchnorm_infer(t(np.zeros((1, 2, 2, 2))), BnParams.identity(3))


# -- activations / structure -------------------------------------------------

def test_activation_values():
    x = t([[[[-1.0, 2.0, 0.0, -2.0]]]])
    assert T.activation(x, "relu").data.ravel()[:2].tolist() == [0.0, 2.0]
    assert T.activation(x, "silu").data.ravel()[2] == 0.0
    assert T.activation(x, "lrelu").data.ravel()[3] == pytest.approx(-0.2)
    with pytest.raises(ValueError):
        T.activation(x, "gelu")


def test_upsample():
    assert np.all(T.upsample_nearest2x(t(np.full((1, 1, 1, 1), 5.0))).data == 5)
    y = T.upsample_nearest2x(t([[[[1, 2], [3, 4]]]])).data[0, 0]
    np.testing.assert_array_equal(y, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_upsample_then_stride2_sampling_recovers(n, c, h, w):
    x = np.random.default_rng(n * 100 + c * 10 + h + w).standard_normal((n, c, h, w)).astype(np.float32)
    y = T.upsample_nearest2x(t(x)).data
    np.testing.assert_array_equal(y[:, :, ::2, ::2], x)


def test_concat():
    a = t(np.random.default_rng(7).standard_normal((1, 2, 4, 4)))
    b = t(np.random.default_rng(8).standard_normal((1, 3, 4, 4)))
    assert T.concat_channels([a]) is a
    y = T.concat_channels([a, b])
    assert y.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(y.data[:, :2], a.data)
    np.testing.assert_array_equal(y.data[:, 2:], b.data)
    with pytest.raises(ShapeError, match="input 1"):
        T.concat_channels([a, t(np.zeros((1, 3, 2, 4)))])


def test_add():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    y = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.add(t(x), t(np.zeros_like(x))).data, x)
    np.testing.assert_array_equal(T.add(t(x), t(-x)).data, np.zeros_like(x))
    out = T.add(t(x), t(y)).data
    for idx in np.ndindex(x.shape):
        assert out[idx] == np.float32(x[idx] + y[idx])
    with pytest.raises(ShapeError):
        T.add(t(x), t(np.zeros((1, 2, 3, 3))))


def test_ops_are_bit_deterministic():
    rng = np.random.default_rng(10)
    x = t(rng.standard_normal((2, 4, 6, 6)))
    p = ConvParams(t(rng.standard_normal((5, 4, 3, 3))), t(rng.standard_normal(5)), 2, 1)
    a = T.activation(T.conv2d(x, p), "silu").data
    b = T.activation(T.conv2d(x, p), "silu").data
    assert a.tobytes() == b.tobytes()


# -- gradients --------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(11).standard_normal((2, 3, 2, 2)), requires_grad=True)
    g = T.backward(T.tensor_sum(x), [x])[x]
    np.testing.assert_array_equal(g.data, np.ones(x.shape))


def test_grad_of_half_square_is_x():
    x = Tensor(np.random.default_rng(12).standard_normal((1, 2, 3, 3)), requires_grad=True)
    loss = T.dot_const(T.mul(x, x), np.full(x.shape, 0.5))
    np.testing.assert_allclose(T.backward(loss, [x])[x].data, x.data, rtol=1e-12)


def test_backward_rejects_param_not_on_tape():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    other = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with pytest.raises(ValueError, match="not on the tape"):
        T.backward(T.tensor_sum(x), [other])


def _away_from_kinks(a, tol=1e-2):
    a = np.asarray(a)
    return np.where(np.abs(a) < tol, np.sign(a + 1e-12) * (tol + 0.05), a)


def _fd_check(build_loss, arrays, seed_arrays=None):
    loss, grads = tape_grads(build_loss, arrays)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [np.array(x, np.float64) for x in arrays]
            args[i] = v
            ts = [Tensor(x) for x in args]
            return float(build_loss(*ts).data.reshape(()))
        num = numeric_grad(f, a)
        assert rel_err(grads[i], num) <= 1e-4, (i, rel_err(grads[i], num))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)])
def test_conv_gradients_fd(k, stride, pad):
    rng = np.random.default_rng(100 + k * 10 + stride)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        proj = rng.standard_normal((2, 2, (5 + 2 * pad - k) // stride + 1, (5 + 2 * pad - k) // stride + 1))
        _fd_check(lambda x, w, b: T.dot_const(T.conv2d(x, ConvParams(w, b, stride, pad)), proj), [x, w, b])


def test_bn_infer_gradients_fd():
    rng = np.random.default_rng(20)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 3, 3))
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        m, v = rng.standard_normal(3), rng.random(3) + 0.5
        proj = rng.standard_normal(x.shape)

        def loss(x, g, b):
            return T.dot_const(T.batchnorm_infer(x, BnParams(g, b, m.copy(), v.copy(), 1e-3)), proj)
        _fd_check(loss, [x, g, b])


def test_bn_train_gradients_fd():
    rng = np.random.default_rng(21)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 3, 3))
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        proj = rng.standard_normal(x.shape)

        def loss(x, g, b):
            p = BnParams(g, b, np.zeros(3), np.ones(3), 1e-3)
            return T.dot_const(T.batchnorm_train(x, p), proj)
        _fd_check(loss, [x, g, b])


@pytest.mark.parametrize("kind", ["relu", "silu", "lrelu"])
def test_activation_gradients_fd(kind):
    rng = np.random.default_rng(22)
    for _ in range(10):
        x = _away_from_kinks(rng.standard_normal((1, 2, 3, 3)))
        proj = rng.standard_normal(x.shape)
        _fd_check(lambda x: T.dot_const(T.activation(x, kind), proj), [x])


def test_structural_op_gradients_fd():
    rng = np.random.default_rng(23)
    for _ in range(10):
        a = rng.standard_normal((1, 2, 2, 3))
        b = rng.standard_normal((1, 3, 2, 3))
        c = rng.standard_normal((1, 2, 2, 3))
        alpha = rng.standard_normal(1)
        p_up = rng.standard_normal((1, 2, 4, 6))
        p_cat = rng.standard_normal((1, 5, 2, 3))

        def loss(a, b, c, alpha):
            up = T.dot_const(T.upsample_nearest2x(a), p_up)
            cat = T.dot_const(T.concat_channels([T.add(a, T.scale(c, alpha)), b]), p_cat)
            return T.dot_const(T.concat_channels([up, cat]), np.ones((1, 2, 1, 1)))
        _fd_check(loss, [a, b, c, alpha])


def test_shared_subexpression_accumulates():
    x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    loss = T.tensor_sum(T.add(T.mul(x, x), x))
    assert T.backward(loss, [x])[x].data.item() == pytest.approx(7.0)
