"""COCO-style average precision with 101-point interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..boxes import pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0, 1, 101)


@dataclass
class APResult:
    ap: float
    ap50: float
    per_class: dict[int, float] = field(default_factory=dict)  # AP over thresholds
    empty: bool = False  # no ground truth at all


def _as_arrays(dets):
    """Detection objects or (boxes, scores, labels) -> three arrays."""
    if isinstance(dets, tuple) and len(dets) == 3:
        b, s, l = dets
        return np.asarray(b, np.float64).reshape(-1, 4), np.asarray(s, np.float64).reshape(-1), np.asarray(l, int).reshape(-1)
    dets = list(dets)
    return (np.array([d.box for d in dets], np.float64).reshape(-1, 4),
            np.array([d.score for d in dets], np.float64), np.array([d.cls for d in dets], int))


def _gt_arrays(gts):
    if isinstance(gts, tuple) and len(gts) == 2:
        return np.asarray(gts[0], np.float64).reshape(-1, 4), np.asarray(gts[1], int).reshape(-1)
    if hasattr(gts, "boxes") and hasattr(gts, "labels"):
        return np.asarray(gts.boxes, np.float64).reshape(-1, 4), np.asarray(gts.labels, int)
    gts = list(gts)
    return np.array([g.box for g in gts], np.float64).reshape(-1, 4), np.array([g.cls for g in gts], int)


def match_image(det_boxes, det_scores, gt_boxes, thr: float) -> np.ndarray:
    """Greedy matching for one image and class: detections by descending score
    (ties by input order) each take the unmatched GT of highest IoU >= thr.
    Returns a true-positive flag per detection, in input order."""
    tp = np.zeros(len(det_boxes), bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    iou = pairwise_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), bool)
    for d in np.argsort(-det_scores, kind="stable"):
        cand = np.where(taken, -1.0, iou[d])
        g = int(np.argmax(cand))
        if cand[g] >= thr:
            taken[g] = True
            tp[d] = True
    return tp


def interpolated_ap(tp_sorted: np.ndarray, n_gt: int) -> float:
    """101-point AP of a score-sorted TP sequence."""
    if n_gt == 0:
        return float("nan")
    if len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def class_ap(dets_per_image, gts_per_image, cls: int, thr: float) -> float:
    scores, flags, n_gt = [], [], 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        db, ds, dl = dets
        gb, gl = gts
        dm, gm = dl == cls, gl == cls
        n_gt += int(gm.sum())
        flags.append(match_image(db[dm], ds[dm], gb[gm], thr))
        scores.append(ds[dm])
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, bool)
    order = np.argsort(-scores, kind="stable")
    return interpolated_ap(flags[order], n_gt)


def evaluate_ap(dets_per_image, gts_per_image, iou_thresholds=COCO_THRESHOLDS) -> APResult:
    """Mean over classes with ground truth of the AP averaged over
    ``iou_thresholds``; ``ap50`` uses 0.5 alone.

    Detections per image are lists of ``Detection`` or ``(boxes, scores,
    labels)``; ground truth is a list of ``GroundTruth``, ``(boxes, labels)``
    or anything with ``boxes`` and ``labels`` attributes.
    """
    dets = [_as_arrays(d) for d in dets_per_image]
    gts = [_gt_arrays(g) for g in gts_per_image]
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different numbers of images")
    classes = sorted({int(c) for _, l in gts for c in l})
    if not classes:
        return APResult(0.0, 0.0, {}, empty=True)
    per_class = {c: float(np.mean([class_ap(dets, gts, c, t) for t in iou_thresholds])) for c in classes}
    ap50 = float(np.mean([class_ap(dets, gts, c, 0.5) for c in classes]))
    return APResult(float(np.mean(list(per_class.values()))), ap50, per_class)
