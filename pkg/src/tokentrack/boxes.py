"""Box conventions.

``BBox`` is center form ``(cx, cy, w, h)``. Inside a crop it is normalized to
the crop side; in frame coordinates it is in pixels. Annotation files and
results use top-left ``x y w h`` pixels; IoU helpers take corner arrays
``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2,
                         self.cx + self.w / 2, self.cy + self.h / 2])

    def xywh(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h])

    @classmethod
    def from_xyxy(cls, b) -> "BBox":
        x0, y0, x1, y1 = map(float, b)
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_xywh(cls, b) -> "BBox":
        x, y, w, h = map(float, b)
        return cls(x + w / 2, y + h / 2, w, h)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*map(float, a))


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def iou(a, b) -> np.ndarray:
    """Intersection over union of corner boxes; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
