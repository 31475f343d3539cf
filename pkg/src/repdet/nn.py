"""Module containers over :mod:`repdet.tensor` ops."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import BnParams, ConvParams, Tensor


class Module:
    """Attribute-walking container: Tensors with ``requires_grad`` are
    parameters, ``Module`` attributes (or lists of them) are children."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def modules(self) -> Iterator[tuple[str, "Module"]]:
        yield "", self
        for name, child in self.children():
            for sub, m in child.modules():
                yield (f"{name}.{sub}" if sub else name), m

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, m in self.modules():
            for name, t in m._own_parameters():
                yield (f"{prefix}.{name}" if prefix else name), t

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, m in self.modules():
            for name, b in m._own_buffers():
                yield (f"{prefix}.{name}" if prefix else name), b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv(Module):
    """Plain convolution with ``padding = k // 2``.

    ``observer`` (called with the input array) and ``quant`` (a fake-quant
    spec from :mod:`repdet.quantsim`) are hooks used by calibration and
    quantization; both default to off.
    """

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, bias: bool = False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(he_normal(rng, (c_out, c_in, k, k)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = k // 2
        self.observer: Callable | None = None
        self.quant = None

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        if self.observer is not None:
            self.observer(x.data)
        if self.quant is not None and self.quant.enabled:
            x, p = self.quant.apply(x, self.params)
            return T.conv2d(x, p)
        return T.conv2d(x, self.params)


class BatchNorm(Module):
    def __init__(self, c: int, eps: float = 1e-3, momentum: float = 0.03):
        self.gamma = _param(np.ones(c))
        self.beta = _param(np.zeros(c))
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.eps = eps
        self.momentum = momentum

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    @property
    def params(self) -> BnParams:
        return BnParams(self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            return T.batchnorm_train(x, self.params, self.momentum)
        return T.batchnorm_infer(x, self.params)


class ConvBNAct(Module):
    """conv -> batch norm -> activation; folds to a biased conv on fuse."""

    def __init__(self, c_in, c_out, k=1, stride=1, act="relu", rng=None):
        self.conv = Conv(c_in, c_out, k, stride, bias=False, rng=rng)
        self.bn: BatchNorm | None = BatchNorm(c_out)
        self.act = act

    @property
    def fused(self) -> bool:
        return self.bn is None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return T.activation(y, self.act)

    def fuse(self) -> None:
        from .reparam import fold_bn

        if self.bn is None:
            raise RuntimeError("ConvBNAct is already fused")
        p = fold_bn(self.conv.params, self.bn.params)
        self.conv.weight = p.weight
        self.conv.bias = p.bias
        self.bn = None
