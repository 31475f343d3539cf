"""Anchor-free decoding and class-wise NMS."""

from __future__ import annotations

import numpy as np

from ..boxes import anchor_points, pairwise_iou
from ..types import Detection
from .graph import HeadOutputs

CONF_THRESH = 0.03
NMS_IOU = 0.65


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def distances_from_logits(raw: np.ndarray, reg_max: int) -> np.ndarray:
    """(..., 4 * (reg_max + 1)) raw box outputs -> (..., 4) distances in cells."""
    raw = np.asarray(raw, np.float64)
    if reg_max == 0:
        return raw
    bins = raw.reshape(raw.shape[:-1] + (4, reg_max + 1))
    bins = bins - bins.max(axis=-1, keepdims=True)
    p = np.exp(bins)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(reg_max + 1, dtype=np.float64)


def flatten_outputs(h: HeadOutputs, image: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor class logits (A, C) and raw box outputs (A, 4(R+1)),
    levels concatenated in stride order, cells row-major."""
    cls = [c.data[image].reshape(c.shape[1], -1).T for c in h.cls]
    box = [b.data[image].reshape(b.shape[1], -1).T for b in h.box]
    return np.concatenate(cls).astype(np.float64), np.concatenate(box).astype(np.float64)


def boxes_from_distances(points: np.ndarray, strides: np.ndarray, dist: np.ndarray) -> np.ndarray:
    d = dist * strides[:, None]
    return np.stack([points[:, 0] - d[:, 0], points[:, 1] - d[:, 1],
                     points[:, 0] + d[:, 2], points[:, 1] + d[:, 3]], axis=1)


def decode(h: HeadOutputs, conf_thresh: float = CONF_THRESH, reg_max: int = 16, image: int = 0) -> list[Detection]:
    """Detections for one image of the batch.

    Each cell contributes at most one detection, for its highest-scoring class.
    """
    if reg_max < 0:
        raise ValueError("reg_max must be >= 0")
    logits, raw = flatten_outputs(h, image)
    points, strides = anchor_points(h.grid_sizes(), h.strides)
    boxes = boxes_from_distances(points, strides, distances_from_logits(raw, reg_max))
    cls = np.argmax(logits, axis=1)
    score = _sigmoid(logits[np.arange(len(cls)), cls])
    keep = np.flatnonzero(score > conf_thresh)
    return [Detection(*map(float, boxes[i]), int(cls[i]), float(score[i])) for i in keep]


def decode_batch(h: HeadOutputs, conf_thresh: float = CONF_THRESH, reg_max: int = 16) -> list[list[Detection]]:
    return [decode(h, conf_thresh, reg_max, i) for i in range(h.cls[0].shape[0])]


def nms(dets, iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy suppression within each class.

    Candidates are visited by descending score, ties broken by smaller x1 then
    smaller y1; a box is dropped when its IoU with an already kept box of the
    same class exceeds ``iou_thresh``.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must be in (0, 1)")
    dets = list(dets)
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].x1, dets[i].y1, i))
    boxes = np.array([dets[i].box for i in order], np.float64)
    classes = np.array([dets[i].cls for i in order])
    iou = pairwise_iou(boxes, boxes)
    alive = np.ones(len(order), bool)
    for a in range(len(order)):
        if not alive[a]:
            continue
        later = np.arange(a + 1, len(order))
        hit = later[(classes[later] == classes[a]) & (iou[a, later] > iou_thresh)]
        alive[hit] = False
    return [dets[order[a]] for a in np.flatnonzero(alive)]


def postprocess(h: HeadOutputs, reg_max: int, conf_thresh: float = CONF_THRESH,
                iou_thresh: float = NMS_IOU) -> list[list[Detection]]:
    return [nms(d, iou_thresh) for d in decode_batch(h, conf_thresh, reg_max)]
