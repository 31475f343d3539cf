"""The training loop: augment, forward, assign, loss, backward, SGD, EMA."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..assigner import Anchors, atss_assign, make_anchors, tal_assign
from ..losses import CLS_LOSSES, box_loss_grad, dfl_grad, distill_loss_grad
from ..netdef import build, load_weights, postprocess, save_weights
from ..netdef.config import ModelConfig
from ..netdef.graph import HeadOutputs, Model
from ..netdef.postprocess import boxes_from_distances
from ..netdef.weights import atomic_write_bytes
from ..tensor import Tensor
from .config import TrainConfig, dump_config
from .data import SynthSample, gen_synth_dataset, gray_border_preprocess, mixup, mosaic
from .metrics import APResult, evaluate_ap
from .optim import cosine_lr, ema_update, sgd_step

EVAL_CONF = 0.001
VAL_SEED_OFFSET = 1_000_003
LOG_HEADER = ("epoch", "lr", "loss_cls", "loss_box", "loss_dfl", "loss_distill", "ap", "ap50")


class TrainingDiverged(RuntimeError):
    pass


# -- head outputs in anchor-major layout ---------------------------------------------------

def anchor_major(maps: list[Tensor]) -> np.ndarray:
    """Per-level (B, K, H, W) maps -> (B, A, K) float64, levels concatenated."""
    return np.concatenate([m.data.reshape(m.shape[0], m.shape[1], -1).transpose(0, 2, 1) for m in maps],
                          axis=1).astype(np.float64)


def split_levels(g: np.ndarray, maps: list[Tensor]) -> list[np.ndarray]:
    """Inverse of :func:`anchor_major` for a gradient array."""
    out, a = [], 0
    for m in maps:
        b, k, h, w = m.shape
        out.append(np.ascontiguousarray(g[:, a:a + h * w].transpose(0, 2, 1).reshape(b, k, h, w)))
        a += h * w
    return out


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


@dataclass
class LossTerms:
    cls: float = 0.0
    box: float = 0.0
    dfl: float = 0.0
    distill: float = 0.0

    @property
    def total(self) -> float:
        return self.cls + self.box + self.dfl + self.distill


def detection_loss(h: HeadOutputs, targets: list[SynthSample], anchors: Anchors, mcfg: ModelConfig,
                   tcfg: TrainConfig, use_atss: bool, assignments=None):
    """Loss terms and their gradients wrt the raw cls / box maps.

    Classification uses the configured loss against soft targets q from the
    assigner. Box loss (SIoU for N, GIoU otherwise) and DFL are weighted by
    q; all terms are normalized by the sum of q over the batch. q is a
    constant target (no gradient flows through the assignment).
    ``assignments`` (one per image) bypasses the assigner.
    """
    logits, raw = anchor_major(h.cls), anchor_major(h.box)
    bsz, n_anchor, n_cls = logits.shape
    reg_max = mcfg.reg_max
    s = anchors.strides
    if reg_max > 0:
        probs = _softmax(raw.reshape(bsz, n_anchor, 4, reg_max + 1))
        bins = np.arange(reg_max + 1, dtype=np.float64)
        dist = probs @ bins
    else:
        dist = raw
    scores = _sigmoid(logits)

    cls_target = np.zeros_like(logits)
    pos_items = []
    for b, smp in enumerate(targets):
        pred = boxes_from_distances(anchors.points, s, dist[b])
        gts = (smp.boxes, smp.labels)
        if assignments is not None:
            asg = assignments[b]
        elif use_atss:
            asg = atss_assign(anchors, gts, pred_boxes=pred)
        else:
            asg = tal_assign(anchors, gts, scores[b], pred)
        pos = np.flatnonzero(asg.positive)
        cls_target[b, pos, asg.labels[pos]] = asg.quality[pos]
        pos_items.append((b, pos, pred[pos], asg.boxes[pos], asg.quality[pos]))
    norm = max(float(cls_target.sum()), 1.0)

    cls_loss, g_logits = CLS_LOSSES[tcfg.cls_loss](logits, cls_target)
    terms = LossTerms(cls=tcfg.cls_weight * float(cls_loss.sum()) / norm)
    g_logits = g_logits * (tcfg.cls_weight / norm)

    g_dist = np.zeros_like(dist)
    g_raw = np.zeros_like(raw)
    for b, pos, pred, gt, q in pos_items:
        if len(pos) == 0:
            continue
        loss, g = box_loss_grad(pred, gt, mcfg.box_loss)
        w = tcfg.box_weight * q / norm
        terms.box += float((loss * w).sum())
        g = g * w[:, None]
        st = s[pos]
        # box = point -/+ distance * stride
        g_dist[b, pos] = np.stack([-g[:, 0], -g[:, 1], g[:, 2], g[:, 3]], axis=1) * st[:, None]
        if reg_max > 0:
            p = anchors.points[pos]
            ltrb = np.stack([p[:, 0] - gt[:, 0], p[:, 1] - gt[:, 1], gt[:, 2] - p[:, 0], gt[:, 3] - p[:, 1]], axis=1)
            ltrb = np.clip(ltrb / st[:, None], 0, reg_max - 0.01)
            lg = raw[b, pos].reshape(len(pos), 4, reg_max + 1)
            dl, dg = dfl_grad(lg, ltrb)
            wd = tcfg.dfl_weight * q / norm / 4
            terms.dfl += float((dl.sum(axis=1) * wd).sum())
            g_raw[b, pos] += (dg * wd[:, None, None]).reshape(len(pos), -1)
    if reg_max > 0:
        # d(expectation)/d(logit_k) = p_k (k - expectation)
        gd = g_dist[..., None] * probs * (bins - dist[..., None])
        g_raw += gd.reshape(g_raw.shape)
    else:
        g_raw += g_dist
    return terms, split_levels(g_logits, h.cls), split_levels(g_raw, h.box)


def seed_backward(h: HeadOutputs, g_cls, g_box, params) -> list[np.ndarray]:
    """Backpropagate externally computed output gradients to ``params``."""
    total = None
    for m, g in list(zip(h.cls, g_cls)) + list(zip(h.box, g_box)):
        term = T.dot_const(m, g)
        total = term if total is None else T.add(total, term)
    grads = T.backward(total, params)
    return [grads[p].data for p in params]


# -- evaluation ---------------------------------------------------------------------------

def predict(m: Model, images: list[np.ndarray], batch_size: int = 16, conf: float = EVAL_CONF):
    """Post-processed detections for each (3, H, W) image (equal sizes per batch)."""
    was = m.training
    m.eval()
    out = []
    try:
        with T.accumulate(np.float32):
            for i in range(0, len(images), batch_size):
                x = Tensor(np.stack(images[i:i + batch_size]).astype(np.float32))
                out.extend(postprocess(m(x), m.cfg.reg_max, conf))
    finally:
        m.train(was)
    return out


def evaluate_model(m: Model, data: list[SynthSample], mode: str | None = None, target: int | None = None,
                   batch_size: int = 16) -> APResult:
    """AP / AP50 of ``m`` on ``data``; ``mode`` letterboxes each image first
    (``border`` or ``resize``) and maps detections back before scoring."""
    if mode is None:
        dets = predict(m, [s.image for s in data], batch_size)
    else:
        prepped = [gray_border_preprocess(s.image, 32, mode, target) for s in data]
        raw = predict(m, [p[0] for p in prepped], batch_size)
        dets = []
        for d, (_, lb) in zip(raw, prepped):
            if d:
                boxes = lb.inverse(np.array([x.box for x in d]))
                dets.append((boxes, np.array([x.score for x in d]), np.array([x.cls for x in d])))
            else:
                dets.append((np.zeros((0, 4)), np.zeros(0), np.zeros(0, int)))
    return evaluate_ap(dets, [(s.boxes, s.labels) for s in data])


# -- the loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    ema: Model
    rows: list[tuple] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)

    def log_text(self) -> str:
        return format_log(self.rows)


def format_log(rows) -> str:
    lines = ["\t".join(LOG_HEADER)]
    for r in rows:
        lines.append("\t".join([str(r[0])] + [f"{v:.6g}" if i == 0 else f"{v:.6f}" for i, v in enumerate(r[1:])]))
    return "\n".join(lines) + "\n"


def _augment(data, i, rng, tcfg: TrainConfig, use_mosaic: bool, allow_mixup: bool = True) -> SynthSample:
    smp = data[i]
    size = (tcfg.img_size, tcfg.img_size)
    if use_mosaic and rng.random() < tcfg.mosaic_prob:
        others = rng.integers(len(data), size=3)
        smp = mosaic([smp] + [data[j] for j in others], size, rng)
    elif smp.hw != size:
        img, lb = gray_border_preprocess(smp.image, 32, "resize", tcfg.img_size)
        smp = SynthSample(img, lb.forward(smp.boxes), smp.labels)
    if allow_mixup and tcfg.mixup_prob > 0 and rng.random() < tcfg.mixup_prob:
        other = _augment(data, int(rng.integers(len(data))), rng, tcfg, use_mosaic, allow_mixup=False)
        smp = mixup(smp, other, tcfg.mixup_beta, rng)
    if rng.random() < 0.5:
        w = smp.image.shape[2]
        b = smp.boxes.copy()
        b[:, [0, 2]] = w - smp.boxes[:, [2, 0]]
        smp = SynthSample(np.ascontiguousarray(smp.image[:, :, ::-1]), b, smp.labels)
    return smp


def _state_arrays(m: Model) -> list[np.ndarray]:
    return [p.data for p in m.parameters()] + [b for _, b in m.named_buffers()]


def train(m: Model | None, tcfg: TrainConfig, data: list[SynthSample], val: list[SynthSample] | None = None,
          mcfg: ModelConfig | None = None, out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Train ``m`` (or a fresh model from ``mcfg``) on ``data``.

    With ``out_dir`` the raw and EMA checkpoints, the metrics log and a
    separate wall-clock log are written there (atomically, after every
    epoch). ``val`` defaults to a held-out synthetic split.
    """
    if m is None:
        if mcfg is None:
            raise ValueError("train needs a model or a model config")
        m = build(mcfg, seed=tcfg.seed)
    mcfg = m.cfg
    if m.fused:
        raise ValueError("cannot train a fused model")
    if not data:
        raise ValueError("empty training set")
    if val is None:
        val = gen_synth_dataset(tcfg.val_size, tcfg.seed + VAL_SEED_OFFSET, mcfg.num_classes, tcfg.img_size)
    teacher = None
    if tcfg.teacher:
        teacher = load_weights(tcfg.teacher)
        if teacher.cfg.num_classes != mcfg.num_classes or teacher.cfg.reg_max != mcfg.reg_max:
            raise ValueError("teacher head does not match the student")
        teacher.eval()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "config.json", dump_config(mcfg, tcfg).encode())

    rng = np.random.default_rng(tcfg.seed)
    m.train()
    ema = copy.deepcopy(m)
    ema.ema = True
    params = m.parameters()
    buffers = [b for _, b in m.named_buffers()]
    ema_arrays = _state_arrays(ema)
    velocity: list = []
    steps_per_epoch = math.ceil(len(data) / tcfg.batch_size)
    total = tcfg.epochs * steps_per_epoch
    warmup = tcfg.warmup_epochs * steps_per_epoch
    anchors_cache: dict = {}
    result = TrainResult(m, ema)
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        use_mosaic = epoch < tcfg.mosaic_epochs_frac * tcfg.epochs
        use_atss = epoch < tcfg.atss_epochs
        perm = rng.permutation(len(data))
        sums = LossTerms()
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            batch = [_augment(data, int(i), rng, tcfg, use_mosaic) for i in idx]
            x = Tensor(np.stack([s.image for s in batch]).astype(np.float32))
            lr = cosine_lr(step, total, tcfg.lr0, tcfg.lrf, warmup) if tcfg.lr0 > 0 else 0.0
            with T.accumulate(np.float32):
                h = m(x)
                key = tuple(h.grid_sizes())
                if key not in anchors_cache:
                    anchors_cache[key] = make_anchors(h.grid_sizes(), h.strides)
                terms, g_cls, g_box = detection_loss(h, batch, anchors_cache[key], mcfg, tcfg, use_atss)
                if teacher is not None:
                    th = teacher(x)
                    dl, dgc, dgb = distill_loss_grad(h, th, epoch / tcfg.epochs, tcfg.distill_temperature)
                    terms.distill = tcfg.distill_weight * dl
                    g_cls = [g + tcfg.distill_weight * d for g, d in zip(g_cls, dgc)]
                    g_box = [g + tcfg.distill_weight * d for g, d in zip(g_box, dgb)]
                if not math.isfinite(terms.total):
                    raise TrainingDiverged(f"loss is {terms.total} at epoch {epoch} step {b}")
                grads = seed_backward(h, g_cls, g_box, params)
            if lr > 0:
                new_p, velocity = sgd_step([p.data for p in params], grads, velocity, lr,
                                           tcfg.momentum, tcfg.weight_decay)
                for p, w in zip(params, new_p):
                    p.data = w
            step += 1
            live = [p.data for p in params] + buffers
            for e, v in zip(ema_arrays, ema_update(ema_arrays, live, tcfg.ema_decay, step)):
                e[...] = v
            for k in ("cls", "box", "dfl", "distill"):
                setattr(sums, k, getattr(sums, k) + getattr(terms, k))
        if (epoch + 1) % tcfg.eval_every == 0 or epoch + 1 == tcfg.epochs:
            res = evaluate_model(ema, val)
            ap, ap50 = res.ap, res.ap50
        else:
            ap = ap50 = float("nan")
        row = (epoch + 1, lr, sums.cls / steps_per_epoch, sums.box / steps_per_epoch, sums.dfl / steps_per_epoch,
               sums.distill / steps_per_epoch, ap, ap50)
        result.rows.append(row)
        result.wall_seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(format_log([row]).splitlines()[1] + f"\t{result.wall_seconds[-1]:.1f}s")
        if out is not None:
            save_weights(m, out / "last.rdet", {"epoch": str(epoch + 1)})
            save_weights(ema, out / "ema.rdet", {"epoch": str(epoch + 1)})
            atomic_write_bytes(out / "metrics.tsv", result.log_text().encode())
            timing = "epoch\twall_seconds\n" + "".join(f"{i + 1}\t{w:.3f}\n" for i, w in enumerate(result.wall_seconds))
            atomic_write_bytes(out / "timing.tsv", timing.encode())
    m.eval()
    ema.eval()
    return result
