"""Center-head classification and box regression objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BBox
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

GIOU_WEIGHT = 2.0
L1_WEIGHT = 5.0
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
PROB_FLOOR = 1e-12


def target_peak(gt: BBox, G: int) -> tuple[int, int]:
    i = min(max(int(np.floor(gt.cy * G)), 0), G - 1)
    j = min(max(int(np.floor(gt.cx * G)), 0), G - 1)
    return i, j


def make_target_map(gt: BBox, G: int) -> np.ndarray:
    """Gaussian heat map with a single 1 at the cell holding the box center."""
    pi, pj = target_peak(gt, G)
    sigma = max(1.0, G * min(gt.w, gt.h) / 4.0)
    ii, jj = np.mgrid[0:G, 0:G]
    return np.exp(-((ii - pi) ** 2 + (jj - pj) ** 2) / (2.0 * sigma ** 2))


def focal_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss per map, normalized by the number of peak cells.

    ``pred`` is ``(..., G, G)`` in (0, 1); the result has the leading shape.
    Predictions at or beyond {0, 1} are clamped to ``[1e-12, 1 - 1e-12]``
    and a warning is logged.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != pred.shape:
        raise T.ShapeError(f"target {target.shape} != pred {pred.shape}")
    pd = pred.data
    if np.any(pd < PROB_FLOOR) or np.any(pd > 1.0 - PROB_FLOOR):
        log.warning("focal_loss: %d predictions clamped",
                    int(np.sum((pd < PROB_FLOOR) | (pd > 1.0 - PROB_FLOOR))))
        pred = T.clip(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = (target == 1.0).astype(float)
    neg_w = (1.0 - pos) * (1.0 - target) ** FOCAL_BETA
    one_minus = 1.0 - pred
    pos_term = (one_minus ** FOCAL_ALPHA) * T.log(pred) * pos
    neg_term = (pred ** FOCAL_ALPHA) * T.log(one_minus) * neg_w
    per_map = T.tsum(pos_term + neg_term, axis=(-2, -1))
    n_pos = np.maximum(pos.sum(axis=(-2, -1)), 1.0)
    return -(per_map / n_pos)


def _corners(b):
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_loss(pred, gt) -> Tensor:
    """``1 - GIoU`` for center-form boxes ``(..., 4)``; result in [0, 2)."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if np.any(pred.data[..., 2:] <= 0) or np.any(gt.data[..., 2:] <= 0):
        raise ContractError("giou_loss needs boxes with positive width and height")
    px0, py0, px1, py1 = _corners(pred)
    gx0, gy0, gx1, gy1 = _corners(gt)
    iw = T.maximum(T.minimum(px1, gx1) - T.maximum(px0, gx0), 0.0)
    ih = T.maximum(T.minimum(py1, gy1) - T.maximum(py0, gy0), 0.0)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    hull = (T.maximum(px1, gx1) - T.minimum(px0, gx0)) * (T.maximum(py1, gy1) - T.minimum(py0, gy0))
    giou = inter / union - (hull - union) / hull
    return 1.0 - giou


def l1_loss(pred, gt) -> Tensor:
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    return T.mean(T.absolute(pred - gt), axis=-1)


@dataclass
class LossBreakdown:
    cls: object
    giou: object
    l1: object
    total: object

    def floats(self) -> "LossBreakdown":
        f = lambda v: v.item() if isinstance(v, Tensor) else float(v)  # noqa: E731
        return LossBreakdown(f(self.cls), f(self.giou), f(self.l1), f(self.total))


def total_loss(cls, giou, l1, giou_weight: float = GIOU_WEIGHT,
               l1_weight: float = L1_WEIGHT) -> LossBreakdown:
    """``total = cls + 2 * giou + 5 * l1`` by default; works on floats or scalar tensors."""
    return LossBreakdown(cls, giou, l1, cls + giou_weight * giou + l1_weight * l1)
