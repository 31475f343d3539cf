"""Re-parameterizable blocks and their fusion into single-path convolutions.

A :class:`RepConv` trains as three parallel branches (3x3 conv+BN, 1x1
conv+BN, and a BN-only identity when shapes allow) whose sum feeds one
activation. Every branch is linear up to that activation, so the whole
unit collapses into one 3x3 convolution with bias.
"""

from __future__ import annotations

import copy
import math

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv, ConvBNAct, Module, _param
from .tensor import BnParams, ConvParams, ShapeError, Tensor


def fold_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Fold inference batch-norm into the preceding convolution."""
    if conv.c_out != bn.channels:
        raise ShapeError(f"fold_bn: conv c_out={conv.c_out} but batch norm has {bn.channels} channels")
    denom = np.asarray(bn.running_var, np.float64) + bn.eps
    if np.any(denom <= 0):
        raise ValueError("fold_bn: running_var + eps must be positive")
    std = np.sqrt(denom)
    gamma = bn.gamma.data.astype(np.float64)
    factor = gamma / std
    w = conv.weight.data.astype(np.float64) * factor[:, None, None, None]
    prior = conv.bias.data.astype(np.float64) if conv.bias is not None else 0.0
    b = bn.beta.data.astype(np.float64) + (prior - np.asarray(bn.running_mean, np.float64)) * factor
    dtype = conv.weight.data.dtype
    return ConvParams(
        Tensor(w.astype(dtype), requires_grad=True),
        Tensor(b.astype(dtype), requires_grad=True),
        conv.stride,
        conv.padding,
    )


def pad_1x1_to_3x3(k: Tensor) -> Tensor:
    w = k.data
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"pad_1x1_to_3x3: expected (c_out, c_in, 1, 1) kernel, got {w.shape}")
    out = np.zeros(w.shape[:2] + (3, 3), dtype=w.dtype)
    out[:, :, 1, 1] = w[:, :, 0, 0]
    return Tensor(out)


def identity_to_3x3(c: int, dtype=np.float32) -> Tensor:
    if c < 1:
        raise ValueError(f"identity_to_3x3: channel count must be >= 1, got {c}")
    out = np.zeros((c, c, 3, 3), dtype=dtype)
    out[np.arange(c), np.arange(c), 1, 1] = 1
    return Tensor(out)


def hidden_channels(channels: int, cc: float) -> int:
    """round-half-up(channels * cc), at least 1."""
    h = math.floor(channels * cc + 0.5)
    if h < 1:
        raise ValueError(f"hidden channels for {channels} x {cc} is {h} < 1")
    return h


class RepConv(Module):
    """Three-branch 3x3 unit (training) or single biased 3x3 conv (fused)."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, act: str = "relu",
                 use_identity: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.stride, self.act = c_in, c_out, stride, act
        self.dense = Conv(c_in, c_out, 3, stride, rng=rng)
        self.dense_bn = BatchNorm(c_out)
        self.one_by_one = Conv(c_in, c_out, 1, stride, rng=rng)
        self.one_by_one_bn = BatchNorm(c_out)
        self.identity_bn = BatchNorm(c_out) if (use_identity and c_in == c_out and stride == 1) else None
        self.fused: Conv | None = None

    @property
    def mode(self) -> str:
        return "fused" if self.fused is not None else "training"

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"RepConv expects {self.c_in} input channels, got shape {x.shape}")
        if self.fused is not None:
            return T.activation(self.fused(x), self.act)
        y = T.add(self.dense_bn(self.dense(x)), self.one_by_one_bn(self.one_by_one(x)))
        if self.identity_bn is not None:
            y = T.add(y, self.identity_bn(x))
        return T.activation(y, self.act)

    def fused_params(self) -> ConvParams:
        """The equivalent single 3x3 conv (with bias) of the three branches."""
        d = fold_bn(self.dense.params, self.dense_bn.params)
        o = fold_bn(self.one_by_one.params, self.one_by_one_bn.params)
        w = d.weight.data.astype(np.float64) + pad_1x1_to_3x3(o.weight).data
        b = d.bias.data.astype(np.float64) + o.bias.data
        if self.identity_bn is not None:
            ident = ConvParams(identity_to_3x3(self.c_in, np.float64), None, 1, 1)
            i = fold_bn(ident, self.identity_bn.params)
            w = w + i.weight.data
            b = b + i.bias.data
        dtype = self.dense.weight.data.dtype
        return ConvParams(Tensor(w.astype(dtype), requires_grad=True),
                          Tensor(b.astype(dtype), requires_grad=True), self.stride, 1)

    def fuse_inplace(self) -> None:
        if self.fused is not None:
            raise RuntimeError("RepConv is already fused")
        p = self.fused_params()
        conv = Conv.__new__(Conv)
        conv.weight, conv.bias, conv.stride, conv.padding = p.weight, p.bias, p.stride, 1
        conv.observer, conv.quant = None, None
        self.fused = conv
        del self.dense, self.dense_bn, self.one_by_one, self.one_by_one_bn
        self.identity_bn = None


def repconv_forward(x: Tensor, u: RepConv) -> Tensor:
    return u.forward(x)


def fuse(u: RepConv) -> RepConv:
    """Return a fused copy of ``u``; ``u`` itself is left untouched."""
    if u.fused is not None:
        raise RuntimeError("fuse: unit is already fused")
    out = copy.deepcopy(u)
    out.fuse_inplace()
    return out


class RepBlock(Module):
    """``n`` stacked RepConv units; the first maps c_in -> c_out."""

    def __init__(self, c_in: int, c_out: int, n: int = 1, act: str = "relu", stride: int = 1, rng=None):
        if n < 1:
            raise ValueError(f"RepBlock repeat must be >= 1, got {n}")
        self.units = [RepConv(c_in, c_out, stride, act, rng=rng)]
        self.units += [RepConv(c_out, c_out, 1, act, rng=rng) for _ in range(n - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for u in self.units:
            x = u(x)
        return x


class BottleRep(Module):
    """Two RepConv units plus a residual scaled by a learnable scalar (init 1)."""

    def __init__(self, c: int, act: str = "relu", rng=None):
        self.conv1 = RepConv(c, c, 1, act, rng=rng)
        self.conv2 = RepConv(c, c, 1, act, rng=rng)
        self.alpha = _param(np.ones(1))

    def forward(self, x: Tensor) -> Tensor:
        return T.add(self.conv2(self.conv1(x)), T.scale(x, self.alpha))


class CSPStackRep(Module):
    """Cross-stage partial block over stacked BottleRep units.

    Two 1x1 projections split the input into ``hidden`` channels each; one
    path runs through the BottleRep stack, then both are concatenated and
    projected to ``c_out``.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, cc: float = 0.5, act: str = "relu", rng=None):
        if n < 1:
            raise ValueError(f"CSPStackRep needs at least one BottleRep, got {n}")
        self.hidden = hidden_channels(c_out, cc)
        self.cv1 = ConvBNAct(c_in, self.hidden, 1, 1, act, rng=rng)
        self.cv2 = ConvBNAct(c_in, self.hidden, 1, 1, act, rng=rng)
        self.m = [BottleRep(self.hidden, act, rng=rng) for _ in range(n)]
        self.cv3 = ConvBNAct(2 * self.hidden, c_out, 1, 1, act, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        return self.cv3(T.concat_channels([y, self.cv2(x)]))


def cspstackrep_forward(x: Tensor, block: CSPStackRep) -> Tensor:
    return block.forward(x)


def fuse_module(m: Module) -> None:
    """Fuse every RepConv and fold every ConvBNAct inside ``m`` in place."""
    for _, sub in list(m.modules()):
        if isinstance(sub, RepConv):
            sub.fuse_inplace()
        elif isinstance(sub, ConvBNAct):
            sub.fuse()


def is_fused(m: Module) -> bool:
    for _, sub in m.modules():
        if isinstance(sub, RepConv) and sub.fused is None:
            return False
        if isinstance(sub, ConvBNAct) and not sub.fused:
            return False
    return True
