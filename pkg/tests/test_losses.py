import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repdet import losses as L
from repdet.netdef import HeadOutputs
from repdet.tensor import Tensor

from helpers import rel_err

LN2 = math.log(2)


# -- hand-evaluated examples ----------------------------------------------------

def test_focal_examples():
    assert L.focal_loss(1.0, 1) < 1e-6
    assert math.isclose(L.focal_loss(0.5, 1, 0.25, 2.0), 0.25 * 0.25 * LN2, rel_tol=1e-9)
    assert math.isclose(L.focal_loss(0.5, 1, 0.25, 2.0), 0.04332, abs_tol=5e-6)
    for p in (0.1, 0.5, 0.9):
        for y in (0, 1):
            assert math.isclose(L.focal_loss(p, y, 0.5, 0.0), 0.5 * L.bce(p, y), rel_tol=1e-12)


def test_qfl_examples():
    assert L.qfl(0.3, 0.3) == 0.0
    assert math.isclose(L.qfl(0.3, 0.6, beta=0.0), L.bce(0.3, 0.6), rel_tol=1e-12)
    expect = 0.36 * (-0.8 * math.log(0.2) - 0.2 * math.log(0.8))
    assert math.isclose(L.qfl(0.2, 0.8, 2.0), expect, rel_tol=1e-9)
    assert math.isclose(L.qfl(0.2, 0.8, 2.0), 0.4795, abs_tol=1e-4)  # quoted value is truncated


def test_vfl_examples():
    assert L.vfl(1.0, 1.0) < 1e-6
    assert L.vfl(0.0, 0.0) < 1e-12
    assert math.isclose(L.vfl(0.5, 0.5), -0.5 * math.log(0.5), rel_tol=1e-9)
    assert math.isclose(L.vfl(0.5, 0.5), 0.34657, abs_tol=5e-6)


def test_poly_examples():
    for p in (0.2, 0.7):
        assert math.isclose(L.poly_loss(p, 1, 0.0), L.bce(p, 1), rel_tol=1e-12)
    assert L.poly_loss(1.0, 1) < 1e-6
    assert math.isclose(L.poly_loss(0.5, 1, 1.0), LN2 + 0.5, rel_tol=1e-9)
    assert math.isclose(L.poly_loss(0.5, 1, 1.0), 1.19315, abs_tol=5e-6)


def test_clamp_at_exact_bounds():
    assert math.isfinite(L.focal_loss(0.0, 1)) and math.isfinite(L.vfl(1.0, 0.0))
    assert math.isclose(L.bce(0.0, 1), -math.log(L.EPS), rel_tol=1e-9)


def test_vfl_q1_is_bce():
    for p in np.linspace(0.01, 0.99, 25):
        assert math.isclose(L.vfl(p, 1.0), L.bce(p, 1.0), rel_tol=1e-12)


# -- box losses: independent scalar oracle -------------------------------------------

def oracle_box(a, b, kind, theta=4.0):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    wa, ha, wb, hb = ax2 - ax1, ay2 - ay1, bx2 - bx1, by2 - by1
    union = wa * ha + wb * hb - inter
    iou = inter / union
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    if kind == "iou":
        return 1 - iou
    if kind == "giou":
        c = cw * ch
        return 1 - (iou - (c - union) / c)
    sx = (bx1 + bx2) / 2 - (ax1 + ax2) / 2
    sy = (by1 + by2) / 2 - (ay1 + ay2) / 2
    sigma = math.hypot(sx, sy)
    sin_a = abs(sy) / sigma if sigma > 0 else 0.0
    lam = 1 - 2 * math.sin(math.asin(sin_a) - math.pi / 4) ** 2
    gamma = 2 - lam
    dist = sum(1 - math.exp(-gamma * r) for r in ((sx / cw) ** 2, (sy / ch) ** 2))
    ow = abs(wa - wb) / max(wa, wb)
    oh = abs(ha - hb) / max(ha, hb)
    shape = (1 - math.exp(-ow)) ** theta + (1 - math.exp(-oh)) ** theta
    return 1 - (iou - (dist + shape) / 2)


def test_box_hand_examples():
    a, b = (0, 0, 2, 2), (1, 1, 3, 3)
    assert math.isclose(L.iou_family(a, b, "iou"), 1 - 1 / 7, rel_tol=1e-9)
    assert math.isclose(L.iou_family(a, b, "giou"), 1 + 5 / 63, rel_tol=1e-9)
    assert math.isclose(L.iou_family(a, b, "giou"), 1.0794, abs_tol=5e-5)
    for kind in ("iou", "giou", "siou"):
        assert abs(L.iou_family(a, a, kind)) < 1e-9
    far = L.iou_family((0, 0, 1, 1), (1e6, 1e6, 1e6 + 1, 1e6 + 1), "giou")
    assert 2 - far < 1e-5 and far < 2


def test_box_degenerate():
    assert L.iou_family((1, 1, 1, 1), (1, 1, 1, 1), "giou") == 0.0
    with pytest.raises(ValueError):
        L.iou_family((0, 0, 0, 2), (0, 1, 0, 3), "siou")
    with pytest.raises(ValueError):
        L.iou_family((0, 0, 1, 1), (2, 2, 1, 1), "iou")
    # zero-area prediction inside a real enclosing box is fine
    assert math.isfinite(L.iou_family((1, 1, 1, 1), (0, 0, 2, 2), "siou"))


def random_pairs(rng, n):
    a = rng.uniform(0, 50, (n, 2))
    b = rng.uniform(0, 50, (n, 2))
    wa, wb = rng.uniform(1, 30, (n, 2)), rng.uniform(1, 30, (n, 2))
    return np.hstack([a, a + wa]), np.hstack([b, b + wb])


@pytest.mark.parametrize("kind", ["iou", "giou", "siou"])
def test_box_vectorized_matches_oracle(kind):
    p, g = random_pairs(np.random.default_rng(0), 300)
    got, _ = L.box_loss_grad(p, g, kind)
    ref = np.array([oracle_box(a, b, kind) for a, b in zip(p, g)])
    np.testing.assert_allclose(got, ref, atol=1e-7)


@pytest.mark.parametrize("kind", ["iou", "giou", "siou"])
def test_box_gradients_finite_differences(kind):
    rng = np.random.default_rng(1)
    p, g = random_pairs(rng, 60)
    _, grad = L.box_loss_grad(p, g, kind)
    h = 1e-5
    worst = 0.0
    for i in range(len(p)):
        num = np.zeros(4)
        for k in range(4):
            pp, pm = p[i].copy(), p[i].copy()
            pp[k] += h
            pm[k] -= h
            num[k] = (L.box_loss_grad(pp, g[i], kind)[0][0] - L.box_loss_grad(pm, g[i], kind)[0][0]) / (2 * h)
        # skip pairs sitting on a kink (edges within h of each other)
        edges = np.abs(np.subtract.outer(p[i], g[i])).min()
        if edges < 1e-3 or np.linalg.norm(num) < 1e-8:
            continue
        worst = max(worst, rel_err(grad[i], num))
    assert worst <= 1e-4


box_st = st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 80), st.floats(0.5, 80))


def as_box(t):
    x, y, w, h = t
    return (x, y, x + w, y + h)


@settings(max_examples=300, deadline=None)
@given(box_st, box_st)
def test_box_loss_range(a, b):
    a, b = as_box(a), as_box(b)
    assert 0 <= L.iou_family(a, b, "iou") <= 1
    for kind in ("giou", "siou"):
        v = L.iou_family(a, b, kind)
        assert -1e-12 <= v < 2


@settings(max_examples=200, deadline=None)
@given(box_st, box_st, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10))
def test_box_loss_translation_scale_invariance(a, b, tx, ty, s):
    a, b = np.array(as_box(a)), np.array(as_box(b))
    t = np.array([tx, ty, tx, ty])
    for kind in ("iou", "giou", "siou"):
        base = L.iou_family(a, b, kind)
        assert abs(L.iou_family(a + t, b + t, kind) - base) <= 1e-6
        assert abs(L.iou_family(a * s, b * s, kind) - base) <= 1e-6


# -- classification gradients ------------------------------------------------------

def fd_logit(fn, x, t, h=1e-5):
    return (fn(x + h, t)[0] - fn(x - h, t)[0]) / (2 * h)


@pytest.mark.parametrize("name", ["vfl", "qfl", "focal", "poly", "bce"])
def test_cls_gradients(name):
    fn = L.CLS_LOSSES[name]
    rng = np.random.default_rng(2)
    x = rng.uniform(-4, 4, 200)
    if name in ("focal", "poly"):
        t = rng.integers(0, 2, 200)
    else:
        t = np.where(rng.random(200) < 0.5, 0.0, rng.uniform(0.05, 1, 200))
    loss, g = fn(x, t)
    assert rel_err(g, fd_logit(fn, x, t)) <= 1e-4
    assert np.all(loss >= 0)


def test_logit_and_probability_forms_agree():
    x = np.linspace(-5, 5, 41)
    p = 1 / (1 + np.exp(-x))
    q = np.linspace(0, 1, 41)
    y = (q > 0.5).astype(int)
    np.testing.assert_allclose(L.vfl_grad(x, q)[0], L.vfl(p, q), rtol=1e-6)
    np.testing.assert_allclose(L.qfl_grad(x, q)[0], L.qfl(p, q), rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(L.focal_grad(x, y)[0], L.focal_loss(p, y), rtol=1e-6)
    np.testing.assert_allclose(L.poly_grad(x, y)[0], L.poly_loss(p, y), rtol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0, 1), st.integers(0, 1))
def test_cls_losses_non_negative(p, q, y):
    assert L.focal_loss(p, y) >= 0
    assert L.qfl(p, q) >= 0
    assert L.vfl(p, q) >= 0
    assert L.poly_loss(p, y) >= 0


# -- DFL ------------------------------------------------------------------------

def test_dfl_examples():
    logits = np.full(17, -50.0)
    logits[5] = 50.0
    assert L.dfl(logits, 5.0) < 1e-12
    for y in (0.0, 3.3, 8.0, 15.9, 16.0):
        assert math.isclose(L.dfl(np.zeros(17), y), math.log(17), rel_tol=1e-12)


def test_dfl_target_expectation():
    for y in (0.0, 0.25, 7.5, 15.99, 16.0):
        t = L.dfl_target(np.array(y), 16)
        assert math.isclose(t.sum(), 1.0) and math.isclose(t @ np.arange(17), y, abs_tol=1e-12)
    with pytest.raises(ValueError):
        L.dfl(np.zeros(17), 16.5)
    with pytest.raises(ValueError):
        L.dfl(np.zeros(17), -0.1)


def test_dfl_gradient():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(20, 17))
    y = rng.uniform(0, 16, 20)
    _, g = L.dfl_grad(z, y)
    num = np.zeros_like(z)
    h = 1e-5
    for i in range(20):
        for k in range(17):
            zp, zm = z.copy(), z.copy()
            zp[i, k] += h
            zm[i, k] -= h
            num[i, k] = (L.dfl_grad(zp, y)[0][i] - L.dfl_grad(zm, y)[0][i]) / (2 * h)
    assert rel_err(g, num) <= 1e-4


def test_dfl_descent_converges_to_target():
    z = np.zeros(17)
    y = 6.3
    errs = []
    for step in range(20000):
        _, g = L.dfl_grad(z[None], np.array([y]))
        z -= 2.0 * g[0]
        if step % 5000 == 4999:
            p = np.exp(z - z.max())
            errs.append(abs(p / p.sum() @ np.arange(17) - y))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    p = np.exp(z - z.max())
    p /= p.sum()
    assert abs(p @ np.arange(17) - y) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 16), st.floats(0, 1))
def test_dfl_midpoint_convexity(seed, y, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 3, 17), rng.normal(0, 3, 17)
    mid = L.dfl(lam * a + (1 - lam) * b, y)
    assert mid <= lam * L.dfl(a, y) + (1 - lam) * L.dfl(b, y) + 1e-9


# -- distillation ---------------------------------------------------------------

def head(rng, reg_max, shapes=((4, 4), (2, 2), (1, 1)), nc=3):
    cls = [Tensor(rng.normal(size=(2, nc) + s)) for s in shapes]
    box = [Tensor(rng.normal(size=(2, 4 * (reg_max + 1)) + s)) for s in shapes]
    return HeadOutputs(cls, box)


def test_distill_weight_schedule():
    assert L.distill_weight(0.0) == 1.0
    assert L.distill_weight(0.5) == pytest.approx(0.5, abs=1e-15)
    assert L.distill_weight(1.0) == 0.0
    assert np.all(np.diff([L.distill_weight(t) for t in np.linspace(0, 1, 50)]) <= 0)


@pytest.mark.parametrize("reg_max", [0, 16])
def test_distill_identical_is_zero(reg_max):
    h = head(np.random.default_rng(4), reg_max)
    assert abs(L.distill_loss(h, h, 0.0)) < 1e-12
    other = head(np.random.default_rng(5), reg_max)
    assert L.distill_loss(h, other, 0.0) > 0
    assert L.distill_loss(h, other, 1.0) == 0.0
    assert L.distill_loss(h, other, 0.5) == pytest.approx(0.5 * L.distill_loss(h, other, 0.0), rel=1e-12)


def test_distill_box_term_present_only_with_bins():
    rng = np.random.default_rng(6)
    s, t = head(rng, 4), head(rng, 4)
    assert L.distill_loss(HeadOutputs(s.cls, t.box), s, 0.0) > 0
    s0, t0 = head(rng, 0), head(rng, 0)
    assert L.distill_loss(HeadOutputs(s0.cls, t0.box), s0, 0.0) < 1e-12


def test_distill_gradient():
    rng = np.random.default_rng(7)
    s, t = head(rng, 2, shapes=((2, 2),)), head(rng, 2, shapes=((2, 2),))
    _, gc, gb = L.distill_loss_grad(s, t, 0.3)
    h = 1e-6
    for arr, g in ((s.cls[0].data, gc[0]), (s.box[0].data, gb[0])):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = L.distill_loss(s, t, 0.3)
            arr[idx] = old - h
            fm = L.distill_loss(s, t, 0.3)
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        assert rel_err(g, num) <= 1e-4


def test_distill_shape_mismatch():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError):
        L.distill_loss(head(rng, 0), head(rng, 0, nc=4), 0.2)
