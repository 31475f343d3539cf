"""Declarative layer table and the executable detector built from it."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .. import tensor as T
from ..nn import Conv, ConvBNAct, Module
from ..reparam import CSPStackRep, RepBlock, RepConv, fuse_module, is_fused
from ..tensor import ShapeError, Tensor
from .config import ModelConfig, preset

KINDS = ("Image", "Conv", "RepBlock", "CSPStackRep", "Upsample", "Concat", "Head")
STRIDES = (8, 16, 32)
MAX_STRIDE = 32


class GraphError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    filters: int | tuple[int, ...] | None = None
    kernel: int | None = None
    stride: int | None = None
    repeat: int = 1
    inputs: tuple[int, ...] = ()

    @property
    def size(self) -> str:
        """The row's "Size" cell as printed in the architecture table."""
        if self.kind == "Upsample":
            return "2 ×"
        if self.kernel is None:
            return "-"
        return f"{self.kernel} × {self.kernel} / {self.stride}"


@dataclass(frozen=True)
class GraphDef:
    rows: tuple[BlockSpec, ...]
    variant: str = "n"
    width_mult: float = 1.0
    depth_mult: float = 1.0
    block_type: str = "repblock"
    cc: float = 0.5


def _n_layout() -> tuple[BlockSpec, ...]:
    B = BlockSpec
    return (
        B("Image"),
        B("Conv", 16, 3, 2, 1, (0,)),
        B("Conv", 32, 3, 2, 1, (1,)),
        B("RepBlock", 32, 1, 1, 1, (2,)),
        B("Conv", 64, 3, 2, 1, (3,)),
        B("RepBlock", 64, 1, 1, 2, (4,)),
        B("Conv", 128, 3, 2, 1, (5,)),
        B("RepBlock", 128, 1, 1, 2, (6,)),
        B("Conv", 256, 3, 2, 1, (7,)),
        B("CSPStackRep", 256, 1, 1, 1, (8,)),
        B("Upsample", None, None, None, 1, (9,)),
        B("Concat", None, None, None, 1, (10, 7)),
        B("RepBlock", 128, 1, 1, 1, (11,)),
        B("Upsample", None, None, None, 1, (12,)),
        B("Concat", None, None, None, 1, (13, 5)),
        B("RepBlock", 64, 1, 1, 1, (14,)),
        B("Conv", 64, 3, 2, 1, (15,)),
        B("Concat", None, None, None, 1, (16, 12)),
        B("RepBlock", 128, 1, 1, 1, (17,)),
        B("Conv", 128, 3, 2, 1, (18,)),
        B("Concat", None, None, None, 1, (19, 9)),
        B("CSPStackRep", 256, 1, 1, 1, (20,)),
        B("Head", (64, 128, 256), None, None, 1, (15, 18, 21)),
    )


N_LAYOUT = _n_layout()


def _width(c: int, mult: float) -> int:
    if mult == 1.0:
        return c
    return max(8, int(math.ceil(c * mult / 8)) * 8)


def _depth(n: int, mult: float) -> int:
    return max(1, int(math.floor(n * mult + 0.5)))


def graph_for(cfg: ModelConfig) -> GraphDef:
    """Base N topology scaled by the config's width/depth multipliers."""
    rows = []
    for r in N_LAYOUT:
        kind = r.kind
        if kind == "RepBlock" and cfg.block_type == "cspstackrep":
            kind = "CSPStackRep"
        filters = r.filters
        if isinstance(filters, int):
            filters = _width(filters, cfg.width_mult)
        elif isinstance(filters, tuple):
            filters = tuple(_width(f, cfg.width_mult) for f in filters)
        repeat = _depth(r.repeat, cfg.depth_mult) if kind in ("RepBlock", "CSPStackRep") else r.repeat
        rows.append(BlockSpec(kind, filters, r.kernel, r.stride, repeat, r.inputs))
    return GraphDef(tuple(rows), cfg.variant, cfg.width_mult, cfg.depth_mult, cfg.block_type, cfg.cc)


def infer_shapes(graph: GraphDef, hw: tuple[int, int] = (640, 640), in_channels: int = 3):
    """Per-row ``(channels, h, w)``; raises :class:`GraphError` on bad rows."""
    shapes: list = []
    for i, r in enumerate(graph.rows):
        if r.kind not in KINDS:
            raise GraphError(i, f"unknown layer kind {r.kind!r}")
        if r.kind == "Image":
            if i != 0:
                raise GraphError(i, "Image must be the first row")
            shapes.append((in_channels, hw[0], hw[1]))
            continue
        if not r.inputs:
            raise GraphError(i, "row has no inputs")
        for j in r.inputs:
            if not 0 <= j < i:
                raise GraphError(i, f"dangling input reference {j}")
        ins = [shapes[j] for j in r.inputs]
        if r.kind == "Concat":
            if len(r.inputs) != 2:
                raise GraphError(i, f"Concat must reference exactly two producers, got {len(r.inputs)}")
            if ins[0][1:] != ins[1][1:]:
                raise GraphError(i, f"Concat spatial mismatch {ins[0][1:]} vs {ins[1][1:]} (rows {r.inputs})")
            shapes.append((ins[0][0] + ins[1][0], ins[0][1], ins[0][2]))
        elif r.kind == "Upsample":
            c, h, w = ins[0]
            shapes.append((c, 2 * h, 2 * w))
        elif r.kind == "Head":
            if not isinstance(r.filters, tuple) or len(r.filters) != len(r.inputs):
                raise GraphError(i, "Head needs one width per input scale")
            shapes.append(tuple(s for s in ins))
        else:
            if len(r.inputs) != 1:
                raise GraphError(i, f"{r.kind} takes one input")
            c, h, w = ins[0]
            s = r.stride or 1
            k = r.kernel if r.kind == "Conv" else 3
            ho = T.conv_output_size(h, k, s, k // 2)
            wo = T.conv_output_size(w, k, s, k // 2)
            shapes.append((r.filters, ho, wo))
    if graph.rows[-1].kind != "Head":
        raise GraphError(len(graph.rows) - 1, "last row must be the Head")
    return shapes


@dataclass
class HeadOutputs:
    cls: list[Tensor]
    box: list[Tensor]
    strides: tuple[int, ...] = STRIDES

    def grid_sizes(self) -> list[tuple[int, int]]:
        return [c.shape[2:] for c in self.cls]


class DecoupledHead(Module):
    """Per scale: a 1x1 stem, then parallel cls and box 3x3 convs, each
    followed by a 1x1 prediction layer."""

    def __init__(self, in_channels, widths, num_classes, reg_max, act, rng):
        self.num_classes = num_classes
        self.reg_max = reg_max
        self.stems, self.cls_convs, self.reg_convs, self.cls_preds, self.reg_preds = [], [], [], [], []
        prior = -math.log((1 - 0.01) / 0.01)
        for c_in, w in zip(in_channels, widths):
            self.stems.append(ConvBNAct(c_in, w, 1, 1, act, rng=rng))
            self.cls_convs.append(ConvBNAct(w, w, 3, 1, act, rng=rng))
            self.reg_convs.append(ConvBNAct(w, w, 3, 1, act, rng=rng))
            cp = Conv(w, num_classes, 1, 1, bias=True, rng=rng)
            cp.weight.data[...] = 0
            cp.bias.data[...] = prior
            rp = Conv(w, 4 * (reg_max + 1), 1, 1, bias=True, rng=rng)
            rp.weight.data[...] = 0
            rp.bias.data[...] = 1.0
            self.cls_preds.append(cp)
            self.reg_preds.append(rp)

    def forward(self, feats: list[Tensor]) -> HeadOutputs:
        cls, box = [], []
        for i, f in enumerate(feats):
            x = self.stems[i](f)
            cls.append(self.cls_preds[i](self.cls_convs[i](x)))
            box.append(self.reg_preds[i](self.reg_convs[i](x)))
        return HeadOutputs(cls, box)


class Model(Module):
    """Executable detector compiled from a :class:`GraphDef`."""

    def __init__(self, cfg: ModelConfig, graph: GraphDef | None = None, seed: int = 0):
        self.cfg = cfg
        self.graph = graph if graph is not None else graph_for(cfg)
        self.seed = seed
        self.ema = False
        shapes = infer_shapes(self.graph)
        rng = np.random.default_rng(seed)
        act = cfg.activation
        layers: list[Module | None] = []
        self.head = None
        for i, r in enumerate(self.graph.rows):
            c_in = shapes[r.inputs[0]][0] if r.inputs else None
            if r.kind == "Conv":
                layers.append(RepConv(c_in, r.filters, r.stride, act, rng=rng))
            elif r.kind == "RepBlock":
                layers.append(RepBlock(c_in, r.filters, r.repeat, act, r.stride or 1, rng=rng))
            elif r.kind == "CSPStackRep":
                layers.append(CSPStackRep(c_in, r.filters, r.repeat, self.graph.cc, act, rng=rng))
            elif r.kind == "Head":
                self.head = DecoupledHead([shapes[j][0] for j in r.inputs], r.filters,
                                          cfg.num_classes, cfg.reg_max, act, rng)
                layers.append(None)
            else:
                layers.append(None)
        self.layers = [m for m in layers if m is not None]
        self._row_layer = []
        k = 0
        for m in layers:
            self._row_layer.append(k if m is not None else None)
            k += m is not None

    @property
    def fused(self) -> bool:
        return is_fused(self)

    @property
    def strides(self) -> tuple[int, ...]:
        return STRIDES

    def forward(self, x: Tensor) -> HeadOutputs:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"model input must be (n, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % MAX_STRIDE or w % MAX_STRIDE:
            raise ShapeError(f"input size {h}x{w} must be divisible by {MAX_STRIDE}")
        outs: list = []
        for i, r in enumerate(self.graph.rows):
            if r.kind == "Image":
                outs.append(x)
            elif r.kind == "Upsample":
                outs.append(T.upsample_nearest2x(outs[r.inputs[0]]))
            elif r.kind == "Concat":
                outs.append(T.concat_channels([outs[j] for j in r.inputs]))
            elif r.kind == "Head":
                return self.head([outs[j] for j in r.inputs])
            else:
                outs.append(self.layers[self._row_layer[i]](outs[r.inputs[0]]))
        raise GraphError(len(self.graph.rows) - 1, "graph has no Head row")


def build(variant: str | ModelConfig | GraphDef = "n", seed: int = 0, **overrides) -> Model:
    """Build a model from a variant name, a config, or an explicit GraphDef."""
    if isinstance(variant, GraphDef):
        cfg = preset(variant.variant, width_mult=variant.width_mult, depth_mult=variant.depth_mult,
                     block_type=variant.block_type, cc=variant.cc, **overrides)
        return Model(cfg, variant, seed)
    cfg = variant if isinstance(variant, ModelConfig) else preset(variant, **overrides)
    return Model(cfg, None, seed)


def forward(m: Model, x: Tensor) -> HeadOutputs:
    return m.forward(x)


def fuse_model(m: Model) -> Model:
    """Fused copy of ``m``: every RepConv collapsed, every BN folded."""
    if m.fused:
        raise RuntimeError("fuse_model: model is already fused")
    out = copy.deepcopy(m)
    fuse_module(out)
    out.eval()
    return out


class Counts(NamedTuple):
    params: int
    flops: int
    macs: int


def count_params_flops(m: Model, input_hw: tuple[int, int] = (640, 640)) -> Counts:
    """Exact trainable parameter count and conv MACs/FLOPs for one image.

    Only convolutions are counted; FLOPs = 2 * MACs.
    """
    params = sum(p.data.size for p in m.parameters())
    macs = 0
    convs = [c for _, c in m.modules() if isinstance(c, Conv)]
    saved = [c.observer for c in convs]

    def observer_for(c: Conv):
        def obs(x):
            nonlocal macs
            h, w = x.shape[2:]
            k = c.weight.data.shape[2]
            ho = T.conv_output_size(h, k, c.stride, c.padding)
            wo = T.conv_output_size(w, k, c.stride, c.padding)
            macs += c.weight.data.size * ho * wo
        return obs

    was_training = m.training
    try:
        for c in convs:
            c.observer = observer_for(c)
        m.eval()
        m.forward(Tensor(np.zeros((1, 3) + tuple(input_hw), np.float32)))
    finally:
        for c, o in zip(convs, saved):
            c.observer = o
        m.train(was_training)
    return Counts(int(params), int(2 * macs), int(macs))


def fusion_max_error(m: Model, fused: Model, n_inputs: int = 100, hw: tuple[int, int] = (64, 64),
                     seed: int = 0, batch_size: int = 10) -> float:
    """Largest |unfused - fused| over all head outputs for ``n_inputs``
    seeded uniform images; ``m`` is evaluated in inference mode."""
    rng = np.random.default_rng(seed)
    was = m.training
    m.eval()
    worst = 0.0
    try:
        for i in range(0, n_inputs, batch_size):
            x = Tensor(rng.random((min(batch_size, n_inputs - i), 3) + tuple(hw)).astype(np.float32))
            a, b = m(x), fused(x)
            for u, v in zip(a.cls + a.box, b.cls + b.box):
                worst = max(worst, float(np.max(np.abs(u.data.astype(np.float64) - v.data))))
    finally:
        m.train(was)
    return worst
