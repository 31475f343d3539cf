"""SGD with momentum, cosine learning-rate decay and weight EMA."""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T

EMA_TAU = 2000.0


def sgd_step(params, grads, state, lr: float, momentum: float = 0.937, weight_decay: float = 5e-4):
    """One momentum step; returns ``(new_params, new_state)``.

    ``state`` is the list of velocities (``None`` entries or an empty list
    start from zero). v <- momentum * v + g + weight_decay * w; w <- w - lr * v.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state = list(state) if state else [None] * len(params)
    new_p, new_v = [], []
    for w, g, v in zip(params, grads, state):
        w, g = np.asarray(w), np.asarray(g)
        if w.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {w.shape}")
        if T.is_checked() and not np.all(np.isfinite(g)):
            raise T.NonFiniteError("non-finite gradient in sgd_step")
        v = (momentum * v if v is not None else 0) + g + weight_decay * w
        new_v.append(np.asarray(v, w.dtype))
        new_p.append((w - lr * v).astype(w.dtype, copy=False))
    return new_p, new_v


def cosine_lr(t: float, total: float, lr0: float, lrf: float, warmup: float = 0) -> float:
    """Cosine decay from ``lr0`` at t = 0 to ``lrf`` at t = total.

    During the first ``warmup`` steps the value is scaled by (t + 1) / warmup.
    """
    if not 0 <= t <= total:
        raise ValueError(f"t must be in [0, {total}], got {t}")
    lr = lrf + 0.5 * (lr0 - lrf) * (1 + math.cos(math.pi * t / total)) if total > 0 else lr0
    if t < warmup:
        lr *= min((t + 1) / warmup, 1.0)
    return lr


def ema_decay_at(decay: float, step: int) -> float:
    return decay * (1 - math.exp(-step / EMA_TAU))


def ema_update(ema_params, params, decay: float, step: int):
    """Return the updated averages; the decay ramps up as 1 - exp(-step / 2000)."""
    if not 0 < decay < 1:
        raise ValueError("decay must be in (0, 1)")
    d = ema_decay_at(decay, step)
    out = []
    for e, p in zip(ema_params, params):
        e, p = np.asarray(e), np.asarray(p)
        out.append((d * e + (1 - d) * p).astype(e.dtype, copy=False))
    return out
