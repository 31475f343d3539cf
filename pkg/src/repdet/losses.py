"""Classification, box-regression, DFL and self-distillation losses.

Two layers of API:

* probability-space functions (``focal_loss``, ``qfl``, ``vfl``, ``poly_loss``,
  ``iou_family``, ``dfl``) that mirror the textbook definitions and clamp
  probabilities to ``[EPS, 1 - EPS]``;
* vectorized ``*_grad`` functions taking logits / boxes and returning the
  elementwise loss together with its analytic gradient, used by the trainer.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-7
BOX_EPS = 1e-9

FOCAL_ALPHA, FOCAL_GAMMA = 0.25, 2.0
VFL_ALPHA, VFL_GAMMA = 0.75, 2.0
QFL_BETA = 2.0
POLY_EPS1 = 1.0
SIOU_THETA = 4.0


def _as_float(a):
    a = np.asarray(a, np.float64)
    return float(a) if a.ndim == 0 else a


def _clamp(p):
    return np.clip(np.asarray(p, np.float64), EPS, 1 - EPS)


def bce(p, q):
    p = _clamp(p)
    q = np.asarray(q, np.float64)
    return _as_float(-(q * np.log(p) + (1 - q) * np.log1p(-p)))


# -- classification, probability space ------------------------------------------

def focal_loss(p, y, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    p = _clamp(p)
    y = np.asarray(y)
    pos = -alpha * (1 - p) ** gamma * np.log(p)
    neg = -(1 - alpha) * p ** gamma * np.log1p(-p)
    return _as_float(np.where(y == 1, pos, neg))


def qfl(p, q, beta: float = QFL_BETA):
    p = _clamp(p)
    q = np.asarray(q, np.float64)
    return _as_float(np.abs(q - p) ** beta * bce(p, q))


def vfl(p, q, alpha: float = VFL_ALPHA, gamma: float = VFL_GAMMA):
    p = _clamp(p)
    q = np.asarray(q, np.float64)
    pos = -q * (q * np.log(p) + (1 - q) * np.log1p(-p))
    neg = -alpha * p ** gamma * np.log1p(-p)
    return _as_float(np.where(q > 0, pos, neg))


def poly_loss(p, y, eps1: float = POLY_EPS1):
    p = _clamp(p)
    y = np.asarray(y, np.float64)
    pt = np.where(y == 1, p, 1 - p)
    return _as_float(-np.log(pt) + eps1 * (1 - pt))


# -- classification on logits, with gradients -------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_terms(x):
    """(p, log p, log(1 - p)) computed stably from logits."""
    x = np.asarray(x, np.float64)
    return _sig(x), -_softplus(-x), -_softplus(x)


def bce_grad(x, q):
    p, lp, lq = _log_terms(x)
    q = np.asarray(q, np.float64)
    return -(q * lp + (1 - q) * lq), p - q


def focal_grad(x, y, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    p, lp, lq = _log_terms(x)
    pos = np.asarray(y) == 1
    loss = np.where(pos, -alpha * (1 - p) ** gamma * lp, -(1 - alpha) * p ** gamma * lq)
    g_pos = alpha * (1 - p) ** gamma * (gamma * p * lp - (1 - p))
    g_neg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * lq)
    return loss, np.where(pos, g_pos, g_neg)


def qfl_grad(x, q, beta: float = QFL_BETA):
    p, lp, lq = _log_terms(x)
    q = np.asarray(q, np.float64)
    ce = -(q * lp + (1 - q) * lq)
    d = p - q
    mod = np.abs(d) ** beta
    dmod = beta * np.abs(d) ** (beta - 1) * np.sign(d) * p * (1 - p) if beta > 0 else 0.0
    return mod * ce, dmod * ce + mod * d


def vfl_grad(x, q, alpha: float = VFL_ALPHA, gamma: float = VFL_GAMMA):
    p, lp, lq = _log_terms(x)
    q = np.asarray(q, np.float64)
    pos = q > 0
    loss = np.where(pos, -q * (q * lp + (1 - q) * lq), -alpha * p ** gamma * lq)
    grad = np.where(pos, q * (p - q), alpha * p ** gamma * (p - gamma * (1 - p) * lq))
    return loss, grad


def poly_grad(x, y, eps1: float = POLY_EPS1):
    p, lp, lq = _log_terms(x)
    pos = np.asarray(y) == 1
    loss = np.where(pos, -lp + eps1 * (1 - p), -lq + eps1 * p)
    grad = np.where(pos, (p - 1) - eps1 * p * (1 - p), p + eps1 * p * (1 - p))
    return loss, grad


CLS_LOSSES = {"vfl": vfl_grad, "qfl": qfl_grad, "focal": focal_grad, "poly": poly_grad, "bce": bce_grad}


# -- box regression ----------------------------------------------------------------

def _split(b):
    b = np.asarray(b, np.float64).reshape(-1, 4)
    return b[:, 0], b[:, 1], b[:, 2], b[:, 3]


def box_loss_grad(pred, gt, kind: str = "giou", theta: float = SIOU_THETA):
    """Per-pair ``1 - metric`` for ``kind`` in {iou, giou, siou} and its
    gradient with respect to ``pred`` (shape (N, 4), xyxy).

    Predicted extents are clipped at zero (gradient masked there); small
    epsilons keep degenerate pairs finite.
    """
    if kind not in ("iou", "giou", "siou"):
        raise ValueError(f"unknown box loss {kind!r}")
    px1, py1, px2, py2 = _split(pred)
    gx1, gy1, gx2, gy2 = _split(gt)
    n = px1.shape[0]

    pw_raw, ph_raw = px2 - px1, py2 - py1
    pw, ph = np.maximum(pw_raw, 0), np.maximum(ph_raw, 0)
    mw, mh = (pw_raw > 0).astype(float), (ph_raw > 0).astype(float)
    gw, gh = np.maximum(gx2 - gx1, 0), np.maximum(gy2 - gy1, 0)

    ix2, ix1 = np.minimum(px2, gx2), np.maximum(px1, gx1)
    iy2, iy1 = np.minimum(py2, gy2), np.maximum(py1, gy1)
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = np.maximum(iw_raw, 0), np.maximum(ih_raw, 0)
    inter = iw * ih
    ap, ag = pw * ph, gw * gh
    u = ap + ag - inter
    ue = u + BOX_EPS
    iou = inter / ue

    loss = 1 - iou
    d_inter = -(1 / ue + inter / ue ** 2)
    d_ap = inter / ue ** 2
    g = np.zeros((n, 4))  # columns: x1, y1, x2, y2
    d_cw = d_ch = None

    if kind in ("giou", "siou"):
        ex2, ex1 = np.maximum(px2, gx2), np.minimum(px1, gx1)
        ey2, ey1 = np.maximum(py2, gy2), np.minimum(py1, gy1)
        cw, ch = ex2 - ex1, ey2 - ey1
        d_cw, d_ch = np.zeros(n), np.zeros(n)

    if kind == "giou":
        c = cw * ch + BOX_EPS
        loss = loss + (c - u) / c
        d_inter = d_inter + 1 / c
        d_ap = d_ap - 1 / c
        d_c = u / c ** 2
        d_cw += d_c * ch
        d_ch += d_c * cw

    if kind == "siou":
        dx = (gx1 + gx2 - px1 - px2) / 2
        dy = (gy1 + gy2 - py1 - py2) / 2
        # angle cost: 1 - 2 sin^2(arcsin(sin a) - pi/4) == sin(2a) = 2|dx||dy| / (dx^2 + dy^2)
        a, b = np.abs(dx), np.abs(dy)
        den = dx * dx + dy * dy + BOX_EPS
        lam = 2 * a * b / den
        gamma = 2 - lam
        cwe, che = cw + BOX_EPS, ch + BOX_EPS
        rx, ry = (dx / cwe) ** 2, (dy / che) ** 2
        ex, ey = np.exp(-gamma * rx), np.exp(-gamma * ry)
        delta = 2 - ex - ey
        mxw, mxh = np.maximum(np.maximum(pw, gw), BOX_EPS), np.maximum(np.maximum(ph, gh), BOX_EPS)
        ow, oh = np.abs(pw - gw) / mxw, np.abs(ph - gh) / mxh
        tw, th = 1 - np.exp(-ow), 1 - np.exp(-oh)
        omega = tw ** theta + th ** theta
        loss = loss + (delta + omega) / 2

        # reverse pass, dL/d(delta) = dL/d(omega) = 1/2
        d_gamma = 0.5 * (rx * ex + ry * ey)
        d_rx, d_ry = 0.5 * gamma * ex, 0.5 * gamma * ey
        d_lam = -d_gamma
        d_a = d_lam * 2 * b * (den - 2 * a * a) / den ** 2
        d_b = d_lam * 2 * a * (den - 2 * b * b) / den ** 2
        d_dx = d_a * np.sign(dx) + d_rx * 2 * dx / cwe ** 2
        d_dy = d_b * np.sign(dy) + d_ry * 2 * dy / che ** 2
        d_cw += -d_rx * 2 * dx * dx / cwe ** 3
        d_ch += -d_ry * 2 * dy * dy / che ** 3
        # dx = gcx - pcx
        g[:, 0] += -0.5 * d_dx
        g[:, 2] += -0.5 * d_dx
        g[:, 1] += -0.5 * d_dy
        g[:, 3] += -0.5 * d_dy

        d_ow = 0.5 * theta * tw ** (theta - 1) * np.exp(-ow)
        d_oh = 0.5 * theta * th ** (theta - 1) * np.exp(-oh)
        d_pw_shape = d_ow * np.where(pw >= gw, np.where(pw > 0, gw / mxw ** 2, 0.0), -1 / mxw)
        d_ph_shape = d_oh * np.where(ph >= gh, np.where(ph > 0, gh / mxh ** 2, 0.0), -1 / mxh)
    else:
        d_pw_shape = d_ph_shape = 0.0

    # intersection -> pred coordinates
    d_iw = d_inter * ih * (iw_raw > 0)
    d_ih = d_inter * iw * (ih_raw > 0)
    g[:, 2] += d_iw * (px2 <= gx2)
    g[:, 0] -= d_iw * (px1 >= gx1)
    g[:, 3] += d_ih * (py2 <= gy2)
    g[:, 1] -= d_ih * (py1 >= gy1)
    # pred area and extents -> pred coordinates
    d_pw = (d_ap * ph + d_pw_shape) * mw
    d_ph = (d_ap * pw + d_ph_shape) * mh
    g[:, 2] += d_pw
    g[:, 0] -= d_pw
    g[:, 3] += d_ph
    g[:, 1] -= d_ph
    # enclosing box -> pred coordinates
    if d_cw is not None:
        g[:, 2] += d_cw * (px2 >= gx2)
        g[:, 0] -= d_cw * (px1 <= gx1)
        g[:, 3] += d_ch * (py2 >= gy2)
        g[:, 1] -= d_ch * (py1 <= gy1)
    return loss, g


def iou_family(pred, gt, kind: str = "giou") -> float:
    """``1 - metric`` for a single box pair."""
    p, q = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if q[2] < q[0] or q[3] < q[1]:
        raise ValueError(f"invalid ground-truth box {tuple(q)}")
    cw = max(p[2], q[2]) - min(p[0], q[0])
    ch = max(p[3], q[3]) - min(p[1], q[1])
    if cw * ch <= 0:
        if np.array_equal(p, q) and p[0] == p[2] and p[1] == p[3]:
            return 0.0
        raise ValueError("zero-area enclosing box for non-identical boxes")
    loss, _ = box_loss_grad(p[None], q[None], kind)
    return float(loss[0])


# -- distribution focal loss ---------------------------------------------------------

def _log_softmax(z):
    z = np.asarray(z, np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def dfl_target(y, reg_max: int) -> np.ndarray:
    """Two-hot distribution over ``reg_max + 1`` bins whose expectation is ``y``."""
    y = np.asarray(y, np.float64)
    if np.any(y < 0) or np.any(y > reg_max):
        raise ValueError(f"DFL target outside [0, {reg_max}]")
    i = np.minimum(np.floor(y), max(reg_max - 1, 0)).astype(int)
    out = np.zeros(y.shape + (reg_max + 1,))
    wl = i + 1 - y
    np.put_along_axis(out, i[..., None], wl[..., None], axis=-1)
    if reg_max > 0:
        np.put_along_axis(out, (i + 1)[..., None], (1 - wl)[..., None], axis=-1)
    return out


def dfl_grad(logits, y):
    """Elementwise DFL over the last axis and its gradient wrt ``logits``."""
    logits = np.asarray(logits, np.float64)
    t = dfl_target(y, logits.shape[-1] - 1)
    ls = _log_softmax(logits)
    return -(t * ls).sum(axis=-1), np.exp(ls) - t


def dfl(logits, y) -> float:
    loss, _ = dfl_grad(np.asarray(logits)[None], np.asarray([y]))
    return float(loss[0])


# -- self-distillation -----------------------------------------------------------------

def distill_weight(t_epoch: float) -> float:
    """Cosine decay from 1 at the start of training to 0 at the end."""
    if not 0 <= t_epoch <= 1:
        raise ValueError("t_epoch must be in [0, 1]")
    return 0.5 * (1 + math.cos(math.pi * t_epoch))


def _kl_rows(student, teacher, temperature: float):
    """Mean over rows of KL(teacher || student) on softmax(last axis / T)
    and its gradient wrt student logits."""
    ls = _log_softmax(student / temperature)
    lt = _log_softmax(teacher / temperature)
    pt = np.exp(lt)
    rows = max(int(np.prod(student.shape[:-1])), 1)
    kl = float((pt * (lt - ls)).sum()) / rows
    grad = (np.exp(ls) - pt) / (temperature * rows)
    return kl, grad


def _anchor_major(t, k):
    a = np.asarray(t.data if hasattr(t, "data") else t, np.float64)
    n, c, h, w = a.shape
    return a.transpose(0, 2, 3, 1).reshape(n * h * w, c // k, k) if k > 1 else a.transpose(0, 2, 3, 1).reshape(-1, c)


def _from_anchor_major(g, shape):
    n, c, h, w = shape
    return g.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def distill_loss_grad(student, teacher, t_epoch: float, temperature: float = 1.0):
    """Weighted soft loss and its gradients wrt the student's cls / box maps.

    Class term: per-anchor KL between softmax distributions over classes.
    Box term (only when the box branch predicts distributions, i.e. more than
    one bin per side): per-side KL between bin distributions.
    """
    if len(student.cls) != len(teacher.cls):
        raise ValueError("student and teacher have different numbers of levels")
    w = distill_weight(t_epoch)
    total = 0.0
    g_cls, g_box = [], []
    for sc, tc, sb, tb in zip(student.cls, teacher.cls, student.box, teacher.box):
        if sc.shape != tc.shape or sb.shape != tb.shape:
            raise ValueError(f"shape mismatch: student {sc.shape}/{sb.shape}, teacher {tc.shape}/{tb.shape}")
        kl, g = _kl_rows(_anchor_major(sc, 1), _anchor_major(tc, 1), temperature)
        total += kl
        g_cls.append(w * _from_anchor_major(g, sc.shape))
        bins = sb.shape[1] // 4
        if bins > 1:
            s3, t3 = _anchor_major(sb, bins), _anchor_major(tb, bins)
            klb, gb = _kl_rows(s3, t3, temperature)
            total += klb
            g_box.append(w * _from_anchor_major(gb.reshape(s3.shape[0], -1), sb.shape))
        else:
            g_box.append(np.zeros(sb.shape))
    return w * total, g_cls, g_box


def distill_loss(student, teacher, t_epoch: float, temperature: float = 1.0) -> float:
    return distill_loss_grad(student, teacher, t_epoch, temperature)[0]
