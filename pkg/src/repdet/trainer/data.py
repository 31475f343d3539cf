"""Synthetic shape dataset, Mosaic/Mixup and letterbox preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from ..boxes import area

SHAPES = ("circle", "square", "triangle")
GRAY = 114 / 255
MIN_SIDE, MAX_SIDE = 12, 28
MIN_AREA_KEPT = 0.2


@dataclass
class SynthSample:
    image: np.ndarray                 # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (G, 4) xyxy pixels
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, int).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def _draw(canvas: np.ndarray, kind: str, x0: int, y0: int, side: int, color) -> tuple[float, float, float, float]:
    """Draw a filled shape inside the square [x0, x0+side) x [y0, y0+side);
    returns its tight box in pixel-edge coordinates."""
    x1, y1 = x0 + side - 1, y0 + side - 1
    if kind == "square":
        cv2.rectangle(canvas, (x0, y0), (x1, y1), color, thickness=-1)
    elif kind == "circle":
        r = (side - 1) // 2
        cv2.circle(canvas, (x0 + r, y0 + r), r, color, thickness=-1)
        x1, y1 = x0 + 2 * r, y0 + 2 * r
    else:
        pts = np.array([[x0 + (side - 1) // 2, y0], [x0, y1], [x1, y1]], np.int32)
        cv2.fillPoly(canvas, [pts], color)
    return float(x0), float(y0), float(x1 + 1), float(y1 + 1)


def _overlaps(box, boxes) -> bool:
    return any(box[0] < b[2] and b[0] < box[2] and box[1] < b[3] and b[1] < box[3] for b in boxes)


def gen_sample(rng: np.random.Generator, size: int = 64, num_classes: int = 3) -> SynthSample:
    noise = rng.uniform(0, 0.25, (size, size, 1)) + rng.uniform(0, 0.35, (1, 1, 3))
    canvas = (np.clip(noise, 0, 1) * 255).astype(np.uint8)
    n_obj = int(rng.integers(1, 6))
    boxes, labels = [], []
    for _ in range(n_obj):
        cls = int(rng.integers(num_classes))
        for _attempt in range(20):
            side = int(rng.integers(MIN_SIDE, MAX_SIDE + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            if not _overlaps((x0, y0, x0 + side, y0 + side), boxes):
                break
        else:
            continue
        color = tuple(int(c) for c in rng.integers(130, 256, 3))
        boxes.append(_draw(canvas, SHAPES[cls], x0, y0, side, color))
        labels.append(cls)
    image = canvas.transpose(2, 0, 1).astype(np.float32) / 255
    return SynthSample(image, np.array(boxes).reshape(-1, 4), np.array(labels, int))


def gen_synth_dataset(n: int, seed: int, num_classes: int = 3, size: int = 64) -> list[SynthSample]:
    """Deterministic in ``(n, seed, num_classes, size)``: one to five
    non-overlapping shapes per image, class i drawn as ``SHAPES[i]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    if size < MAX_SIDE:
        raise ValueError(f"size must be >= {MAX_SIDE}")
    rng = np.random.default_rng(seed)
    return [gen_sample(rng, size, num_classes) for _ in range(n)]


def parse_data_spec(spec: str, size: int = 64, num_classes: int = 3) -> list[SynthSample]:
    """``synth:N:SEED`` -> generated dataset."""
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "synth":
        raise ValueError(f"data spec must look like synth:N:SEED, got {spec!r}")
    try:
        n, seed = int(parts[1]), int(parts[2])
    except ValueError as e:
        raise ValueError(f"bad data spec {spec!r}: {e}") from None
    return gen_synth_dataset(n, seed, num_classes, size)


# -- augmentation -------------------------------------------------------------------

def _clip_boxes(boxes, x0, y0, x1, y1):
    b = boxes.copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], x0, x1)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], y0, y1)
    return b


def _resize(img_chw: np.ndarray, w: int, h: int) -> np.ndarray:
    hwc = np.ascontiguousarray(img_chw.transpose(1, 2, 0))
    out = cv2.resize(hwc, (w, h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(h, w, -1).transpose(2, 0, 1)


def mosaic(samples, out_hw: tuple[int, int], rng: np.random.Generator | None = None,
           center: tuple[float, float] | None = None) -> SynthSample:
    """Tile four samples around a centre point.

    Each sample is scaled to cover its region (aspect kept) with its inner
    corner pinned to the centre; the overhang is cropped. Boxes keeping less
    than 20% of their transformed area are dropped.
    """
    samples = list(samples)
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly 4 samples")
    oh, ow = out_hw
    if center is None:
        if rng is None:
            raise ValueError("mosaic needs rng or center")
        cx = float(rng.uniform(0.25, 0.75)) * ow
        cy = float(rng.uniform(0.25, 0.75)) * oh
    else:
        cx, cy = center
    cx, cy = int(round(cx)), int(round(cy))
    canvas = np.full((samples[0].image.shape[0], oh, ow), GRAY, np.float32)
    regions = [(0, 0, cx, cy), (cx, 0, ow, cy), (0, cy, cx, oh), (cx, cy, ow, oh)]
    out_boxes, out_labels = [], []
    for k, (s, (rx0, ry0, rx1, ry1)) in enumerate(zip(samples, regions)):
        rw, rh = rx1 - rx0, ry1 - ry0
        if rw <= 0 or rh <= 0:
            continue
        h, w = s.hw
        scale = max(rw / w, rh / h)
        sw, sh = max(int(round(w * scale)), rw), max(int(round(h * scale)), rh)
        img = _resize(s.image, sw, sh)
        # pin the corner touching the centre; left/top regions crop from the far side
        ox = rx1 - sw if k in (0, 2) else rx0
        oy = ry1 - sh if k in (0, 1) else ry0
        canvas[:, ry0:ry1, rx0:rx1] = img[:, ry0 - oy:ry1 - oy, rx0 - ox:rx1 - ox]
        if len(s.boxes):
            b = s.boxes * np.array([sw / w, sh / h, sw / w, sh / h]) + np.array([ox, oy, ox, oy])
            full = area(b)
            c = _clip_boxes(b, rx0, ry0, rx1, ry1)
            keep = area(c) >= MIN_AREA_KEPT * full
            keep &= (c[:, 2] > c[:, 0]) & (c[:, 3] > c[:, 1])
            out_boxes.append(c[keep])
            out_labels.append(s.labels[keep])
    boxes = np.concatenate(out_boxes) if out_boxes else np.zeros((0, 4))
    labels = np.concatenate(out_labels) if out_labels else np.zeros(0, int)
    return SynthSample(canvas, boxes, labels)


def mixup(a: SynthSample, b: SynthSample, beta_param: float = 32.0, rng: np.random.Generator | None = None,
          lam: float | None = None) -> SynthSample:
    """Blend two images; the result carries the boxes of both."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup: image shapes differ, {a.image.shape} vs {b.image.shape}")
    if lam is None:
        if rng is None:
            raise ValueError("mixup needs rng or lam")
        lam = float(rng.beta(beta_param, beta_param))
    image = (lam * a.image + (1 - lam) * b.image).astype(np.float32)
    return SynthSample(image, np.concatenate([a.boxes, b.boxes]), np.concatenate([a.labels, b.labels]))


# -- evaluation preprocessing ---------------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    sx: float
    sy: float
    pad_x: float
    pad_y: float

    def forward(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, np.float64).reshape(-1, 4)
        return b * np.array([self.sx, self.sy, self.sx, self.sy]) + np.array([self.pad_x, self.pad_y] * 2)

    def inverse(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, np.float64).reshape(-1, 4)
        return (b - np.array([self.pad_x, self.pad_y] * 2)) / np.array([self.sx, self.sy, self.sx, self.sy])


def gray_border_preprocess(img: np.ndarray, stride: int = 32, mode: str = "border",
                           target: int | None = None) -> tuple[np.ndarray, Letterbox]:
    """Letterbox ``img`` (3, H, W) onto a gray square canvas of side ``target``.

    ``resize``: scale by min(target / h, target / w) and centre.
    ``border``: same, but into a ``target - stride`` square so at least
    ``stride / 2`` gray pixels surround the content.
    With no ``target``, ``border`` pads the image as is and ``resize`` keeps
    the longer side.
    """
    if mode not in ("border", "resize"):
        raise ValueError(f"mode must be 'border' or 'resize', got {mode!r}")
    if stride <= 0 or stride % 2:
        raise ValueError("stride must be a positive even number")
    c, h, w = img.shape
    if target is None:
        target = max(h, w) + (stride if mode == "border" else 0)
    inner = target - stride if mode == "border" else target
    if inner <= 0:
        raise ValueError(f"target {target} too small for stride {stride}")
    scale = min(inner / h, inner / w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    body = img if (nh, nw) == (h, w) else _resize(img, nw, nh)
    px, py = (target - nw) // 2, (target - nh) // 2
    out = np.full((c, target, target), GRAY, np.float32)
    out[:, py:py + nh, px:px + nw] = body
    return out, Letterbox(nw / w, nh / h, float(px), float(py))
