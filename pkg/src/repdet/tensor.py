"""Minimal NCHW tensor engine with a reverse-mode gradient tape.

Every op is a pure function of its inputs. When any input requires a
gradient, the result records its parents and a closure mapping the output
gradient to input gradients; :func:`backward` replays those closures in
reverse topological order.

Feature maps are rank-4 ``(n, c, h, w)`` float32 arrays. Per-channel
parameters (batch-norm affine terms, conv biases) are rank-1.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LRELU_SLOPE = 0.1
ACTIVATIONS = ("relu", "silu", "lrelu", "identity")

_state = {"checked": False, "accumulate": np.float64, "padding": "zeros"}


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when NaN or Inf reaches an op boundary."""


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Scan op inputs for NaN/Inf while the context is active."""
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


def set_checked(enabled: bool) -> None:
    _state["checked"] = bool(enabled)


def is_checked() -> bool:
    return _state["checked"]


@contextlib.contextmanager
def accumulate(dtype):
    """Select the accumulation dtype of the conv fast path.

    float64 is the default. Training loops switch to float32 to halve
    matmul cost; results stay deterministic for a fixed thread count.
    """
    prev = _state["accumulate"]
    _state["accumulate"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["accumulate"] = prev


def set_accumulate(dtype) -> None:
    _state["accumulate"] = np.dtype(dtype).type


@contextlib.contextmanager
def padding_mode(mode: str):
    """Conv border handling: ``"zeros"`` (default) or ``"circular"``."""
    if mode not in ("zeros", "circular"):
        raise ValueError(f"unknown padding mode {mode!r}")
    prev = _state["padding"]
    _state["padding"] = mode
    try:
        yield
    finally:
        _state["padding"] = prev


class Tensor:
    """Array value that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Identity semantics so tensors can key dictionaries.
    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(*arrays: np.ndarray) -> None:
    if not _state["checked"]:
        return
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in input of shape {a.shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Record an op on the tape; ``grad_fn(g)`` returns one gradient per parent."""
    return _make(data, parents, grad_fn)


def _require_nchw(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {w.shape[2]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")
        if self.bias is not None and self.bias.data.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={w.shape[0]}")

    @property
    def kernel(self) -> int:
        return self.weight.data.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.data.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.data.shape[1]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_check(x: Tensor, p: ConvParams) -> tuple[int, int]:
    _require_nchw(x, "conv2d")
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {p.weight.shape}")
    ho = conv_output_size(h, p.kernel, p.stride, p.padding)
    wo = conv_output_size(w, p.kernel, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {p.weight.shape}")
    _check_finite(x.data)
    return ho, wo


def _pad_hw(x: np.ndarray, pad: int, mode: str = "zeros") -> np.ndarray:
    if not pad:
        return x
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="wrap")
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation, im2col + matmul fast path."""
    ho, wo = _conv_check(x, p)
    xd = x.data
    n, c, h, w = xd.shape
    k, s, pad = p.kernel, p.stride, p.padding
    wt = p.weight.data
    c_out = wt.shape[0]
    acc = _state["accumulate"]
    pad_mode = _state["padding"]
    out_dtype = np.result_type(xd.dtype, wt.dtype)

    if k == 1 and pad == 0:
        xs = xd if s == 1 else xd[:, :, ::s, ::s]
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        wmat = wt.reshape(c_out, c)
        y = np.matmul(wmat.astype(acc, copy=False), cols.astype(acc, copy=False))
        y = y.reshape(n, c_out, ho, wo)
    else:
        xp = _pad_hw(xd, pad, pad_mode)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # one large matmul over all batch positions: (c*k*k, n*ho*wo)
        cols = np.asarray(win.transpose(1, 4, 5, 0, 2, 3), dtype=acc, order="C").reshape(c * k * k, n * ho * wo)
        wmat = wt.reshape(c_out, c * k * k)
        y = (wmat.astype(acc, copy=False) @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
        y = np.ascontiguousarray(y)
    if p.bias is not None:
        y = y + p.bias.data.astype(acc, copy=False)[None, :, None, None]
    y = y.astype(out_dtype, copy=False)

    parents = [x, p.weight] + ([p.bias] if p.bias is not None else [])

    need_x = x.requires_grad

    def grad_x_1x1(gm):
        gx_s = np.matmul(wmat.T.astype(acc, copy=False), gm).reshape(n, c, ho, wo)
        if s == 1:
            return gx_s
        gx = np.zeros((n, c, h, w), dtype=acc)
        gx[:, :, ::s, ::s][:, :, :ho, :wo] = gx_s
        return gx

    def grad_x_kxk(gm):
        gc = (wmat.T.astype(acc, copy=False) @ gm).reshape(c, k, k, n, ho, wo)
        gxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=acc)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gc[:, i, j]
        if pad_mode == "circular":
            gx = np.zeros((c, n, h, w), dtype=acc)
            rows = (np.arange(h + 2 * pad) - pad) % h
            cols_ = (np.arange(w + 2 * pad) - pad) % w
            tmp = np.zeros((c, n, h, w + 2 * pad), dtype=acc)
            np.add.at(tmp, (slice(None), slice(None), rows), gxp)
            np.add.at(gx, (slice(None), slice(None), slice(None), cols_), tmp)
        else:
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return gx.transpose(1, 0, 2, 3)

    def grad_fn(g: np.ndarray):
        if k == 1 and pad == 0:
            gm = g.reshape(n, c_out, ho * wo).astype(acc, copy=False)
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wt.shape)
            gx = grad_x_1x1(gm) if need_x else None
        else:
            gm = np.asarray(g.transpose(1, 0, 2, 3), dtype=acc, order="C").reshape(c_out, n * ho * wo)
            gw = (gm @ cols.T).reshape(wt.shape)
            gx = grad_x_kxk(gm) if need_x else None
        # the input gradient is skipped when nothing upstream needs it
        gx = None if gx is None else np.ascontiguousarray(gx, dtype=xd.dtype)
        grads = [gx, gw.astype(wt.dtype, copy=False)]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(p.bias.data.dtype, copy=False))
        return grads

    return _make(y, parents, grad_fn)


def conv2d_direct(x: Tensor, p: ConvParams) -> Tensor:
    """Reference convolution by explicit loops with float64 accumulation.

    Slow by design; used as the oracle for :func:`conv2d`. No gradient.
    """
    ho, wo = _conv_check(x, p)
    xd = np.asarray(x.data, dtype=np.float64)
    wt = np.asarray(p.weight.data, dtype=np.float64)
    n, c, h, w = xd.shape
    k, s, pad = p.kernel, p.stride, p.padding
    c_out = wt.shape[0]
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            yy = i * s + ki - pad
                            if yy < 0 or yy >= h:
                                continue
                            for kj in range(k):
                                xx = j * s + kj - pad
                                if 0 <= xx < w:
                                    acc += xd[b, ci, yy, xx] * wt[o, ci, ki, kj]
                    if p.bias is not None:
                        acc += float(p.bias.data[o])
                    out[b, o, i, j] = acc
    return Tensor(out.astype(np.result_type(x.data.dtype, p.weight.data.dtype)))


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.data.shape
        for name in ("beta", "running_mean", "running_var"):
            v = getattr(self, name)
            shape = v.data.shape if isinstance(v, Tensor) else np.shape(v)
            if shape != c:
                raise ShapeError(f"BnParams.{name} shape {shape} != gamma shape {c}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    @classmethod
    def identity(cls, c: int, eps: float = 1e-5, dtype=np.float32) -> "BnParams":
        return cls(
            Tensor(np.ones(c, dtype)),
            Tensor(np.zeros(c, dtype)),
            np.zeros(c, dtype),
            np.ones(c, dtype),
            eps,
        )


def _bn_channels(x: Tensor, p: BnParams, what: str) -> None:
    _require_nchw(x, what)
    if x.shape[1] != p.channels:
        raise ShapeError(f"{what}: input channels {x.shape[1]} != batch-norm channels {p.channels}")
    _check_finite(x.data)


def batchnorm_infer(x: Tensor, p: BnParams) -> Tensor:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta with running statistics."""
    _bn_channels(x, p, "batchnorm_infer")
    inv = 1.0 / np.sqrt(np.asarray(p.running_var, np.float64) + p.eps)
    scale = (p.gamma.data * inv).astype(x.dtype)
    mean = np.asarray(p.running_mean, x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv.astype(x.dtype)[None, :, None, None]
    y = x.data * scale[None, :, None, None] + (p.beta.data - mean * scale)[None, :, None, None]

    def grad_fn(g):
        return (
            g * scale[None, :, None, None],
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return _make(y.astype(x.dtype, copy=False), [x, p.gamma, p.beta], grad_fn)


def batchnorm_train(x: Tensor, p: BnParams, momentum: float = 0.03) -> Tensor:
    """Batch-statistics normalization; updates ``p``'s running stats in place."""
    _bn_channels(x, p, "batchnorm_train")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    acc = np.promote_types(_state["accumulate"], xd.dtype)
    mean = xd.mean(axis=(0, 2, 3), dtype=acc)
    xc = xd - mean.astype(xd.dtype)[None, :, None, None]
    var = np.mean(np.square(xc, dtype=acc), axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + p.eps)).astype(xd.dtype)
    xhat = xc * inv[None, :, None, None]
    gamma = p.gamma.data
    y = xhat * gamma[None, :, None, None] + p.beta.data[None, :, None, None]
    unbiased = var * m / max(m - 1, 1)
    p.running_mean[...] = (1 - momentum) * p.running_mean + momentum * mean
    p.running_var[...] = (1 - momentum) * p.running_var + momentum * unbiased

    def grad_fn(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        coef = (gamma * inv / m)[None, :, None, None]
        gx = coef * (m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        return gx.astype(xd.dtype, copy=False), gg, gb

    return _make(y, [x, p.gamma, p.beta], grad_fn)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    return _sigmoid(np.asarray(x, dtype=np.result_type(x, np.float32)))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    _check_finite(x.data)
    xd = x.data
    if kind == "identity":
        return x
    if kind == "relu":
        mask = xd > 0
        y = np.maximum(xd, 0)

        def grad_fn(g):
            return (g * mask,)
    elif kind == "lrelu":
        mask = xd > 0
        y = np.where(mask, xd, LRELU_SLOPE * xd).astype(xd.dtype)

        def grad_fn(g):
            return (np.where(mask, g, LRELU_SLOPE * g),)
    else:
        sg = _sigmoid(xd)
        y = xd * sg

        def grad_fn(g):
            return (g * sg * (1 + xd * (1 - sg)),)

    return _make(y, [x], grad_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_nchw(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(y), [x], grad_fn)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input")
    for i, t in enumerate(xs):
        _require_nchw(t, "concat_channels")
        if (t.shape[0], t.shape[2], t.shape[3]) != (xs[0].shape[0], xs[0].shape[2], xs[0].shape[3]):
            raise ShapeError(
                f"concat_channels: input {i} has shape {t.shape}, incompatible with input 0 shape {xs[0].shape}"
            )
    if len(xs) == 1:
        return xs[0]
    y = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(y, list(xs), grad_fn)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    _check_finite(x.data, y.data)

    def grad_fn(g):
        return g, g

    return _make(x.data + y.data, [x, y], grad_fn)


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply by a learnable scalar (shape ``(1,)``)."""
    if alpha.data.size != 1:
        raise ShapeError(f"scale: alpha must hold a single value, got shape {alpha.shape}")
    a = alpha.data.reshape(())

    def grad_fn(g):
        return g * a, np.array([(g * x.data).sum()], dtype=alpha.data.dtype)

    return _make(x.data * a, [x, alpha], grad_fn)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")

    def grad_fn(g):
        return g * y.data, g * x.data

    return _make(x.data * y.data, [x, y], grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a ``(1, 1, 1, 1)`` tensor."""
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(x.dtype),)

    return _make(np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1), [x], grad_fn)


def dot_const(x: Tensor, g: np.ndarray) -> Tensor:
    """Scalar ``sum(x * g)`` with ``g`` held constant.

    Seeds the tape with an externally computed gradient ``g``.
    """
    if x.shape != np.shape(g):
        raise ShapeError(f"dot_const: shape mismatch {x.shape} vs {np.shape(g)}")
    g = np.asarray(g, dtype=x.dtype)

    def grad_fn(up):
        return (g * up.reshape(()),)

    return _make(np.array((x.data * g).sum(), dtype=x.dtype).reshape(1, 1, 1, 1), [x], grad_fn)


# ---------------------------------------------------------------------------
# reverse mode


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Raises ``ValueError`` if a parameter did not take part in the forward
    computation of ``loss``.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _topo(loss) if loss.requires_grad else []
    on_tape = {id(t) for t in order}
    for p in params:
        if id(p) not in on_tape:
            raise ValueError(f"parameter {p!r} is not on the tape of this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = Tensor(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
    return out
