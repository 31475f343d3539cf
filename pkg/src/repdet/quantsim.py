"""INT8 quantization simulation on the fused graph.

Symmetric signed 8-bit: values map to integers in [-127, 127] with
round-half-away-from-zero. Weights use one scale per output channel,
activations (conv inputs) one scale per tensor.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .netdef.weights import load_weights, read_checkpoint, save_weights
from .nn import Conv, Module
from .tensor import ConvParams, Tensor

QMAX = 127
SCALE_FLOOR = 1e-8
KEEP_FLOAT = 6
PERCENTILE = 99.99


@dataclass(frozen=True)
class QuantParams:
    """Scale for a per-tensor (``axis=None``) or per-channel quantizer."""

    scale: np.ndarray
    axis: int | None = None

    def __post_init__(self):
        s = np.asarray(self.scale, np.float64)
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("quantization scale must be positive and finite")
        object.__setattr__(self, "scale", s)

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else "per-channel"

    def broadcast(self, ndim: int) -> np.ndarray:
        if self.axis is None:
            return self.scale.reshape(())
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape)


def scale_from_absmax(a) -> np.ndarray:
    return np.maximum(np.asarray(a, np.float64) / QMAX, SCALE_FLOOR)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def fake_quantize_array(x: np.ndarray, q: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Quantize-dequantize ``x``; also returns the in-range mask used by the
    straight-through gradient."""
    s = q.broadcast(np.ndim(x))
    v = np.asarray(x, np.float64) / s
    inside = np.abs(v) <= QMAX
    y = np.clip(round_half_away(v), -QMAX, QMAX) * s
    return y.astype(np.result_type(x), copy=False), inside


def fake_quantize(x: Tensor, q: QuantParams) -> Tensor:
    y, inside = fake_quantize_array(x.data, q)

    def grad_fn(g):
        return [np.where(inside, g, 0).astype(x.data.dtype, copy=False)]

    return T.make_op(y, [x], grad_fn)


@dataclass(frozen=True)
class LayerQuant:
    weight: QuantParams
    act: QuantParams


class ConvQuantizer:
    """Hook installed as ``Conv.quant``: fake-quantizes the conv input and
    weights; the bias stays in float."""

    def __init__(self, lq: LayerQuant, enabled: bool = True):
        self.lq = lq
        self.enabled = enabled

    def apply(self, x: Tensor, p: ConvParams) -> tuple[Tensor, ConvParams]:
        xq = fake_quantize(x, self.lq.act)
        wq = fake_quantize(p.weight, self.lq.weight)
        return xq, ConvParams(wq, p.bias, p.stride, p.padding)


def quantizable_layers(m: Module) -> list[tuple[str, Conv]]:
    return [(name, c) for name, c in m.modules() if isinstance(c, Conv)]


def _require_fused(m):
    if hasattr(m, "fused") and not m.fused:
        raise ValueError("quantization requires a fused model; call fuse_model first")


def _batches(images, batch_size: int):
    images = np.asarray(images, np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("calibration/probe set must be a non-empty (n, 3, H, W) array")
    for i in range(0, len(images), batch_size):
        yield images[i:i + batch_size]


def _forward(m, x: np.ndarray):
    return m.forward(Tensor(x))


def calibrate(m: Module, images, mode: str = "maxabs", percentile: float = PERCENTILE,
              batch_size: int = 8) -> dict[str, LayerQuant]:
    """Per-layer weight and activation scales from a calibration set."""
    if mode not in ("maxabs", "percentile"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    _require_fused(m)
    layers = quantizable_layers(m)
    absmax = {name: 0.0 for name, _ in layers}
    samples: dict[str, list[np.ndarray]] = {name: [] for name, _ in layers}
    saved = [(c, c.observer) for _, c in layers]

    def observer_for(name):
        def obs(x):
            a = np.abs(x)
            absmax[name] = max(absmax[name], float(a.max()) if a.size else 0.0)
            if mode == "percentile":
                samples[name].append(a.astype(np.float32).ravel())
        return obs

    was_training = m.training
    try:
        m.eval()
        for name, c in layers:
            c.observer = observer_for(name)
        for xb in _batches(images, batch_size):
            _forward(m, xb)
    finally:
        for c, o in saved:
            c.observer = o
        m.train(was_training)

    out = {}
    for name, c in layers:
        w = c.weight.data
        wmax = np.abs(w).reshape(w.shape[0], -1).max(axis=1)
        if mode == "percentile":
            amax = float(np.percentile(np.concatenate(samples[name]), percentile))
        else:
            amax = absmax[name]
        out[name] = LayerQuant(QuantParams(scale_from_absmax(wmax), axis=0), QuantParams(scale_from_absmax(amax)))
    return out


# -- sensitivity -------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSensitivity:
    name: str
    snr_db: float
    cosine: float
    mse: float
    rank: int


@dataclass(frozen=True)
class SensitivityReport:
    layers: tuple[LayerSensitivity, ...]
    kept_float: tuple[str, ...] = field(default=())

    def ranked(self) -> list[LayerSensitivity]:
        return sorted(self.layers, key=lambda r: r.rank)

    def with_keep(self, keep_float: int) -> "SensitivityReport":
        if not 0 <= keep_float <= len(self.layers):
            raise ValueError(f"keep_float must be in [0, {len(self.layers)}], got {keep_float}")
        return SensitivityReport(self.layers, tuple(r.name for r in self.ranked()[:keep_float]))

    def to_text(self) -> str:
        lines = ["layer\tsnr_db\tcosine\tmse\trank\tkept_float"]
        kept = set(self.kept_float)
        for r in self.layers:
            snr = "inf" if math.isinf(r.snr_db) else f"{r.snr_db:.4f}"
            lines.append(f"{r.name}\t{snr}\t{r.cosine:.6f}\t{r.mse:.6e}\t{r.rank}\t{int(r.name in kept)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SensitivityReport":
        rows = [ln.split("\t") for ln in text.strip().splitlines()[1:]]
        layers = tuple(LayerSensitivity(n, float(s), float(c), float(e), int(k)) for n, s, c, e, k, _ in rows)
        kept = sorted((r for r in rows if r[5] == "1"), key=lambda r: int(r[4]))
        return cls(layers, tuple(r[0] for r in kept))


def _stats(acc: dict) -> tuple[float, float, float]:
    yy, ee, qq, yq, n = acc["yy"], acc["ee"], acc["qq"], acc["yq"], acc["n"]
    snr = math.inf if ee == 0 else (10 * math.log10(yy / ee) if yy > 0 else -math.inf)
    den = math.sqrt(yy * qq)
    cos = 1.0 if ee == 0 else (yq / den if den > 0 else 0.0)
    return snr, cos, ee / max(n, 1)


def _accumulate(acc: dict, y: np.ndarray, yq: np.ndarray) -> None:
    y = y.astype(np.float64).ravel()
    yq = yq.astype(np.float64).ravel()
    e = y - yq
    acc["yy"] += float(y @ y)
    acc["ee"] += float(e @ e)
    acc["qq"] += float(yq @ yq)
    acc["yq"] += float(y @ yq)
    acc["n"] += y.size


def flat_outputs(h) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in h.cls + h.box])


def sensitivity(m: Module, q: dict[str, LayerQuant], probe, keep_float: int = KEEP_FLOAT,
                end_to_end: bool = False, batch_size: int = 8) -> SensitivityReport:
    """Rank layers by how much quantizing each one alone degrades its output.

    By default each layer's own output map is compared, float vs quantized,
    on the float input it receives. ``end_to_end`` compares head outputs
    instead.
    """
    _require_fused(m)
    layers = quantizable_layers(m)
    accs = {name: dict(yy=0.0, ee=0.0, qq=0.0, yq=0.0, n=0) for name, _ in layers}
    was_training = m.training
    m.eval()
    try:
        for xb in _batches(probe, batch_size):
            if end_to_end:
                ref = flat_outputs(_forward(m, xb))
                for name, c in layers:
                    prev = c.quant
                    c.quant = ConvQuantizer(q[name])
                    try:
                        out = flat_outputs(_forward(m, xb))
                    finally:
                        c.quant = prev
                    _accumulate(accs[name], ref, out)
                continue
            inputs: dict[str, np.ndarray] = {}
            saved = [(c, c.observer) for _, c in layers]
            try:
                for name, c in layers:
                    c.observer = (lambda nm: (lambda x: inputs.__setitem__(nm, x)))(name)
                _forward(m, xb)
            finally:
                for c, o in saved:
                    c.observer = o
            for name, c in layers:
                x = Tensor(inputs[name])
                y = T.conv2d(x, c.params).data
                xq, pq = ConvQuantizer(q[name]).apply(x, c.params)
                _accumulate(accs[name], y, T.conv2d(xq, pq).data)
    finally:
        m.train(was_training)
    stats = [(name,) + _stats(accs[name]) for name, _ in layers]
    order = sorted(range(len(stats)), key=lambda i: (stats[i][1], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    rows = tuple(LayerSensitivity(n, s, c, e, rank[i]) for i, (n, s, c, e) in enumerate(stats))
    return SensitivityReport(rows).with_keep(min(keep_float, len(rows)))


# -- applying quantizers ---------------------------------------------------------------

def _install(m: Module, q: dict[str, LayerQuant], skip=()) -> Module:
    out = copy.deepcopy(m)
    skip = set(skip)
    for name, c in quantizable_layers(out):
        c.quant = None if name in skip else ConvQuantizer(q[name])
    return out


def partial_quantize(m: Module, q: dict[str, LayerQuant], report: SensitivityReport,
                     keep_float: int = KEEP_FLOAT) -> Module:
    """Copy of ``m`` with every layer fake-quantized except the
    ``keep_float`` most sensitive ones in ``report``."""
    if keep_float < 0:
        raise ValueError("keep_float must be >= 0")
    n = len(quantizable_layers(m))
    if keep_float > n:
        raise ValueError(f"keep_float={keep_float} exceeds the {n} quantizable layers")
    return _install(m, q, report.with_keep(keep_float).kept_float)


def qat_prepare(m: Module, q: dict[str, LayerQuant]) -> Module:
    """Copy of ``m`` with fixed-scale fake-quant on every conv's weights and
    input; gradients flow straight through inside the clamp range."""
    if getattr(m, "qat_prepared", False):
        raise RuntimeError("qat_prepare: model already prepared")
    out = _install(m, q)
    out.qat_prepared = True
    return out


def quantize_all(m: Module, q: dict[str, LayerQuant]) -> Module:
    return _install(m, q)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 1.0


# -- persistence ----------------------------------------------------------------------

def quant_state(m: Module) -> dict:
    """JSON-ready scales of every installed quantizer, keyed by layer name."""
    out = {}
    for name, c in quantizable_layers(m):
        if c.quant is not None:
            lq = c.quant.lq
            out[name] = {"weight": lq.weight.scale.tolist(), "weight_axis": lq.weight.axis,
                         "act": float(lq.act.scale)}
    return out


def install_quant_state(m: Module, state: dict) -> Module:
    """Inverse of :func:`quant_state`; installs quantizers on ``m`` in place."""
    layers = dict(quantizable_layers(m))
    unknown = sorted(set(state) - set(layers))
    if unknown:
        raise ValueError(f"quantizer state names unknown layers: {unknown[:3]}")
    for name, c in layers.items():
        s = state.get(name)
        c.quant = None if s is None else ConvQuantizer(LayerQuant(
            QuantParams(np.asarray(s["weight"]), s["weight_axis"]), QuantParams(np.asarray(s["act"]))))
    return m


def save_quantized(m, path) -> None:
    """Float weights plus per-layer scales (metadata key ``quant``); the
    fake-quant simulation is rebuilt on load."""
    save_weights(m, path, {"quant": json.dumps(quant_state(m), sort_keys=True)})


def load_quantized(path):
    _, meta = read_checkpoint(path)
    m = load_weights(path)
    if "quant" in meta:
        install_quant_state(m, json.loads(meta["quant"]))
    return m
