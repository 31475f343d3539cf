"""Label assignment: ATSS (warm-up), SimOTA and task-aligned (TAL).

All assigners share one convention for ties: the higher metric wins, then the
lower anchor index (when ranking anchors for a GT) or the lower GT index (when
resolving an anchor claimed by several GTs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import anchor_points, centers, pairwise_iou, points_inside
from .types import GroundTruth

TAL_ALPHA, TAL_BETA, TAL_TOPK = 1.0, 6.0, 13
SIMOTA_LAMBDA, SIMOTA_RADIUS, SIMOTA_TOPQ = 3.0, 2.5, 10
ATSS_TOPK = 9
ATSS_ANCHOR_SCALE = 5.0


@dataclass(frozen=True)
class Anchors:
    points: np.ndarray   # (A, 2) centres in input pixels
    strides: np.ndarray  # (A,)
    levels: np.ndarray   # (A,) level index

    def __len__(self) -> int:
        return len(self.strides)

    def boxes(self, scale: float = ATSS_ANCHOR_SCALE) -> np.ndarray:
        half = self.strides[:, None] * scale / 2
        return np.hstack([self.points - half, self.points + half])


def make_anchors(grid_sizes, strides) -> Anchors:
    pts, st = anchor_points(grid_sizes, strides)
    levels = np.concatenate([np.full(h * w, i) for i, (h, w) in enumerate(grid_sizes)]) if len(grid_sizes) else np.zeros(0, int)
    return Anchors(pts, st, levels.astype(int))


@dataclass
class Assignment:
    gt_index: np.ndarray  # (A,) assigned GT or -1
    labels: np.ndarray    # (A,) class or -1
    boxes: np.ndarray     # (A, 4) target boxes, zero for negatives
    quality: np.ndarray   # (A,) soft target q, zero for negatives

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_pos(self) -> int:
        return int(self.positive.sum())


def gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a list of :class:`GroundTruth` or a ``(boxes, labels)`` pair."""
    if isinstance(gts, tuple) and len(gts) == 2 and not isinstance(gts[0], GroundTruth):
        b = np.asarray(gts[0], np.float64).reshape(-1, 4)
        return b, np.asarray(gts[1], int).reshape(-1)
    gts = list(gts)
    b = np.array([g.box for g in gts], np.float64).reshape(-1, 4)
    return b, np.array([g.cls for g in gts], int)


def _finish(n_anchor: int, gt_of: np.ndarray, gt_boxes, gt_labels, quality) -> Assignment:
    pos = gt_of >= 0
    labels = np.full(n_anchor, -1)
    boxes = np.zeros((n_anchor, 4))
    q = np.zeros(n_anchor)
    labels[pos] = gt_labels[gt_of[pos]]
    boxes[pos] = gt_boxes[gt_of[pos]]
    q[pos] = quality[pos]
    return Assignment(gt_of, labels, boxes, q)


def _empty(n_anchor: int) -> Assignment:
    return Assignment(np.full(n_anchor, -1), np.full(n_anchor, -1), np.zeros((n_anchor, 4)), np.zeros(n_anchor))


def _rank(metric: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``idx`` ordered by descending metric, ties to the lower index."""
    return idx[np.lexsort((idx, -metric[idx]))]


def _resolve(claims: np.ndarray, score: np.ndarray) -> np.ndarray:
    """(G, A) boolean claims -> per-anchor GT index; highest ``score`` wins,
    ties to the lower GT index."""
    s = np.where(claims, score, -np.inf)
    best = np.argmax(s, axis=0)  # first maximum = lower GT index
    return np.where(claims.any(axis=0), best, -1)


def atss_assign(anchors: Anchors, gts, topk: int = ATSS_TOPK, pred_boxes=None) -> Assignment:
    """Adaptive training sample selection.

    Anchor boxes are squares of side ``5 * stride`` centred on each point.
    Per GT and per level the ``topk`` anchors nearest to the GT centre are
    candidates; those whose IoU reaches mean + std (population) of the
    candidate IoUs and whose centre lies inside the GT become positive.
    Soft quality is IoU with ``pred_boxes`` when given, else the anchor IoU.
    """
    if topk < 1:
        raise ValueError("topk must be >= 1")
    n = len(anchors)
    if n == 0:
        raise ValueError("atss_assign: no anchors")
    gb, gl = gt_arrays(gts)
    if len(gb) == 0:
        return _empty(n)
    iou = pairwise_iou(gb, anchors.boxes())
    gc = centers(gb)
    dist = np.hypot(anchors.points[None, :, 0] - gc[:, None, 0], anchors.points[None, :, 1] - gc[:, None, 1])
    inside = points_inside(anchors.points, gb).T
    claims = np.zeros((len(gb), n), bool)
    for g in range(len(gb)):
        cand = []
        for lvl in np.unique(anchors.levels):
            idx = np.flatnonzero(anchors.levels == lvl)
            order = idx[np.lexsort((idx, dist[g, idx]))]
            cand.append(order[:topk])
        cand = np.concatenate(cand)
        vals = iou[g, cand]
        thr = vals.mean() + vals.std()
        # equal IoUs give std 0 but a mean that may round one ulp high
        keep = cand[(vals >= thr - 1e-12) & inside[g, cand]]
        claims[g, keep] = True
    gt_of = _resolve(claims, iou)
    if pred_boxes is not None:
        qmat = pairwise_iou(gb, pred_boxes)
    else:
        qmat = iou
    quality = np.where(gt_of >= 0, qmat[np.maximum(gt_of, 0), np.arange(n)], 0.0)
    return _finish(n, gt_of, gb, gl, quality)


def _bce_cost(cls_scores: np.ndarray, gl: np.ndarray) -> np.ndarray:
    """(G, A): sum over classes of BCE(score, one-hot of the GT class)."""
    p = np.clip(np.asarray(cls_scores, np.float64), 1e-7, 1 - 1e-7)
    neg = -np.log1p(-p)                      # cost of target 0, (A, C)
    total_neg = neg.sum(axis=1)              # (A,)
    pos = -np.log(p)                         # cost of target 1
    return total_neg[None, :] - neg[:, gl].T + pos[:, gl].T


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def simota_assign(anchors: Anchors, gts, cls_scores, pred_boxes, lambda_iou: float = SIMOTA_LAMBDA,
                  radius: float = SIMOTA_RADIUS) -> Assignment:
    """Simplified optimal-transport assignment with dynamic k.

    ``cls_scores`` are per-anchor class probabilities (A, C); ``pred_boxes``
    are decoded xyxy boxes (A, 4). Candidates are anchors whose centre is
    inside the GT or within ``radius`` strides of its centre on both axes.
    """
    n = len(anchors)
    gb, gl = gt_arrays(gts)
    if len(gb) == 0 or n == 0:
        return _empty(n)
    iou = pairwise_iou(gb, pred_boxes)
    cost = _bce_cost(cls_scores, gl) + lambda_iou * -np.log(iou + 1e-8)
    gc = centers(gb)
    r = radius * anchors.strides
    near = ((np.abs(anchors.points[None, :, 0] - gc[:, None, 0]) < r[None])
            & (np.abs(anchors.points[None, :, 1] - gc[:, None, 1]) < r[None]))
    cand = points_inside(anchors.points, gb).T | near
    claims = np.zeros((len(gb), n), bool)
    for g in range(len(gb)):
        idx = np.flatnonzero(cand[g])
        if len(idx) == 0:
            continue
        top = np.sort(iou[g, idx])[::-1][:min(SIMOTA_TOPQ, len(idx))]
        k = min(max(_round_half_up(float(top.sum())), 1), len(idx))
        chosen = _rank(-cost[g], idx)[:k]
        claims[g, chosen] = True
    gt_of = _resolve(claims, -cost)
    quality = np.where(gt_of >= 0, iou[np.maximum(gt_of, 0), np.arange(n)], 0.0)
    return _finish(n, gt_of, gb, gl, quality)


def alignment_metric(cls_scores, pred_boxes, gl, gb, alpha: float, beta: float):
    iou = pairwise_iou(gb, pred_boxes)
    s = np.asarray(cls_scores, np.float64)[:, gl].T
    return s ** alpha * iou ** beta, iou


def tal_assign(anchors: Anchors, gts, cls_scores, pred_boxes, alpha: float = TAL_ALPHA, beta: float = TAL_BETA,
               topk: int = TAL_TOPK) -> Assignment:
    """Task-aligned assignment.

    Metric t = s^alpha * u^beta with s the predicted score of the GT class and
    u the IoU of the predicted box. Per GT the ``topk`` anchors by t among
    those centred inside it are claimed. Soft quality of a positive is
    t / max t * max IoU, maxima taken over that GT's final positives.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    n = len(anchors)
    gb, gl = gt_arrays(gts)
    if len(gb) == 0 or n == 0:
        return _empty(n)
    cls_scores = np.asarray(cls_scores, np.float64)
    if cls_scores.shape[0] != n or np.asarray(pred_boxes).shape != (n, 4):
        raise ValueError("predictions must be shaped to the anchors")
    t, iou = alignment_metric(cls_scores, pred_boxes, gl, gb, alpha, beta)
    inside = points_inside(anchors.points, gb).T
    claims = np.zeros((len(gb), n), bool)
    for g in range(len(gb)):
        idx = np.flatnonzero(inside[g])
        claims[g, _rank(t[g], idx)[:topk]] = True
    gt_of = _resolve(claims, t)
    quality = np.zeros(n)
    for g in range(len(gb)):
        mine = np.flatnonzero(gt_of == g)
        if len(mine):
            quality[mine] = t[g, mine] * iou[g, mine].max() / (t[g, mine].max() + 1e-9)
    return _finish(n, gt_of, gb, gl, quality)
