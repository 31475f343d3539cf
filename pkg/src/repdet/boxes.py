"""Plain xyxy box geometry on numpy arrays."""

from __future__ import annotations

import numpy as np


def area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b)); zero where the union is empty."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def centers(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2], axis=-1)


def points_inside(points: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(points), len(b)) mask of points strictly inside each box."""
    p = np.asarray(points, np.float64).reshape(-1, 2)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    return ((p[:, None, 0] > b[None, :, 0]) & (p[:, None, 0] < b[None, :, 2])
            & (p[:, None, 1] > b[None, :, 1]) & (p[:, None, 1] < b[None, :, 3]))


def anchor_points(grid_sizes, strides) -> tuple[np.ndarray, np.ndarray]:
    """Cell centres ((j + 0.5) s, (i + 0.5) s) for every level, row-major,
    concatenated over levels, plus the matching per-anchor stride."""
    pts, st = [], []
    for (h, w), s in zip(grid_sizes, strides):
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts.append(np.stack([(jj.ravel() + 0.5) * s, (ii.ravel() + 0.5) * s], axis=1))
        st.append(np.full(h * w, float(s)))
    return np.concatenate(pts).reshape(-1, 2), np.concatenate(st)
