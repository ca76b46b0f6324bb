"""IoU, Dice and scale/location sensitive losses over soft masks.

Predictions are H x W tensors of probabilities; ground truths are binary
arrays (or tensors) of the same shape.  Set sizes are relaxed to sums, so
``|A & B| = sum(p * g)`` and ``|A | B| = sum(p) + sum(g) - sum(p * g)``.
Pixel coordinates are 1-based with ``x`` the column and ``y`` the row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import (
    Tensor,
    absolute,
    arctan,
    as_tensor,
    max_pool2d,
    maximum,
    minimum,
    sqrt,
)

MASS_EPS = 1e-8
LOCATION_KINDS = ("polar", "L1", "L2")
LOSS_KINDS = ("iou", "dice", "scale", "sls")
VARIANCE_KINDS = ("population", "sample")

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


class EmptyMaskError(ValueError):
    """A mask has (numerically) zero mass where a centroid is required."""


class Centroid(NamedTuple):
    x: Tensor  # column, 1-based
    y: Tensor  # row, 1-based


class PolarPoint(NamedTuple):
    d: Tensor
    theta: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    scale_term: Tensor
    location_term: Tensor
    weight: float | None  # None where the scale weight is undefined (empty gt)

    def as_floats(self) -> dict[str, float | None]:
        return {
            "total": self.total.item(),
            "scale": self.scale_term.item(),
            "location": self.location_term.item(),
            "weight": self.weight,
        }


def _pair(pred, gt) -> tuple[Tensor, Tensor]:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected H x W masks, got {pred.shape}")
    return pred, gt


def _zero_like_graph(pred: Tensor) -> Tensor:
    # keeps the result attached to pred so backward still reaches it
    return pred.sum() * 0.0


def soft_iou_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    inter = (pred * gt).sum()
    union = pred.sum() + gt.sum() - inter
    if union.item() == 0.0:
        return _zero_like_graph(pred)
    return 1.0 - inter / union


def dice_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    inter = (pred * gt).sum()
    total = pred.sum() + gt.sum()
    if total.item() == 0.0:
        return _zero_like_graph(pred)
    return 1.0 - 2.0 * inter / total


def scale_weight(scale_p, scale_gt, variance: str = "population") -> Tensor:
    """Weight ``(min + Var) / (max + Var)`` of two scales.

    ``variance="population"`` uses ``(a - b)^2 / 4``; ``"sample"`` uses
    ``(a - b)^2 / 2``.
    """
    a, b = as_tensor(scale_p), as_tensor(scale_gt)
    if a.item() < 0 or b.item() < 0:
        raise ValueError("scales must be non-negative")
    if a.item() == 0.0 and b.item() == 0.0:
        raise ValueError("scale_weight undefined when both scales are zero")
    if variance not in VARIANCE_KINDS:
        raise ValueError(f"unknown variance kind {variance!r}")
    var = (a - b) ** 2 * (0.25 if variance == "population" else 0.5)
    return (minimum(a, b) + var) / (maximum(a, b) + var)


def _scale_term(pred: Tensor, gt: Tensor, variance: str) -> tuple[Tensor, float | None]:
    area = float(pred.size)
    if gt.data.sum() == 0:
        # Weight is undefined without gt pixels; penalize predicted mass instead.
        return pred.sum() / area, None
    inter = (pred * gt).sum()
    p_sum = pred.sum()
    union = p_sum + gt.sum() - inter
    w = scale_weight(p_sum / area, gt.sum() / area, variance)
    return 1.0 - w * (inter / union), w.item()


def scale_sensitive_loss(pred, gt, variance: str = "population") -> Tensor:
    pred, gt = _pair(pred, gt)
    return _scale_term(pred, gt, variance)[0]


def _grids(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(1, shape[0] + 1, dtype=np.float64)[:, None] * np.ones((1, shape[1]))
    cols = np.ones((shape[0], 1)) * np.arange(1, shape[1] + 1, dtype=np.float64)[None, :]
    return rows, cols


def soft_centroid(mask) -> Centroid:
    """Mass-weighted mean pixel position of a soft or binary mask."""
    mask = as_tensor(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected an H x W mask, got {mask.shape}")
    mass = mask.sum()
    if mass.item() < MASS_EPS:
        raise EmptyMaskError("mask mass below threshold; centroid undefined")
    rows, cols = _grids(mask.shape)
    return Centroid((mask * cols).sum() / mass, (mask * rows).sum() / mass)


def to_polar(c: Centroid) -> PolarPoint:
    x, y = as_tensor(c.x), as_tensor(c.y)
    if x.item() <= 0 or y.item() <= 0:
        raise ValueError("polar conversion expects positive 1-based coordinates")
    return PolarPoint(sqrt(x * x + y * y), arctan(y / x))


def polar_penalty(c_p: Centroid, c_gt: Centroid) -> Tensor:
    """Radial-ratio term plus scaled squared angle difference of two centroids."""
    p, g = to_polar(c_p), to_polar(c_gt)
    radial = 1.0 - minimum(p.d, g.d) / maximum(p.d, g.d)
    dtheta = p.theta - g.theta
    return radial + _FOUR_OVER_PI_SQ * dtheta * dtheta


def _diagonal(shape: tuple[int, int]) -> float:
    return math.hypot(shape[0], shape[1])


def _empty_pred_location(kind: str, shape: tuple[int, int]) -> float:
    # supremum of each penalty over an image of this shape
    if kind == "polar":
        return 2.0
    h, w = shape
    if kind == "L2":
        return math.hypot(h - 1, w - 1) / _diagonal(shape)
    return (h - 1 + w - 1) / _diagonal(shape)


def location_loss_variant(pred, gt, kind: str = "polar") -> Tensor:
    """Centroid-based location penalty.

    ``polar`` is the radial/angular penalty; ``L2`` and ``L1`` are the
    corresponding centroid distances divided by the image diagonal.
    """
    if kind not in LOCATION_KINDS:
        raise ValueError(f"unknown location kind {kind!r}; expected one of {LOCATION_KINDS}")
    pred, gt = _pair(pred, gt)
    if gt.data.sum() < MASS_EPS:
        raise EmptyMaskError("location loss needs a non-empty ground truth")
    if pred.sum().item() < MASS_EPS:
        return Tensor(_empty_pred_location(kind, pred.shape))
    c_p, c_gt = soft_centroid(pred), soft_centroid(gt)
    if kind == "polar":
        return polar_penalty(c_p, c_gt)
    dx, dy = c_p.x - c_gt.x, c_p.y - c_gt.y
    if kind == "L2":
        dist = sqrt(dx * dx + dy * dy)
    else:
        dist = absolute(dx) + absolute(dy)
    return dist / _diagonal(pred.shape)


def location_sensitive_loss(pred, gt) -> Tensor:
    return location_loss_variant(pred, gt, "polar")


def sls_loss(pred, gt, location: str = "polar", variance: str = "population") -> LossBreakdown:
    pred, gt = _pair(pred, gt)
    scale, w = _scale_term(pred, gt, variance)
    if gt.data.sum() == 0:
        loc = Tensor(0.0)
    else:
        loc = location_loss_variant(pred, gt, location)
    return LossBreakdown(scale + loc, scale, loc, w)


def loss_breakdown(kind: str, pred, gt, location: str = "polar", variance: str = "population") -> LossBreakdown:
    """Dispatch on a training loss name: ``iou``, ``dice``, ``scale`` (L_S only) or ``sls``."""
    if kind == "sls":
        return sls_loss(pred, gt, location, variance)
    pred, gt = _pair(pred, gt)
    zero = Tensor(0.0)
    if kind == "scale":
        scale, w = _scale_term(pred, gt, variance)
        return LossBreakdown(scale, scale, zero, w)
    if kind == "iou":
        loss = soft_iou_loss(pred, gt)
    elif kind == "dice":
        loss = dice_loss(pred, gt)
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return LossBreakdown(loss, loss, zero, None)


def downsample_mask(gt: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a binary mask by ``factor``."""
    if factor == 1:
        return np.asarray(gt, dtype=np.float64)
    return max_pool2d(Tensor(gt), factor).data


def supervised_indices(num_side: int) -> list[int]:
    """Side-prediction indices (1..4) kept when ``num_side`` scales are supervised.

    Reducing the count drops the smallest remaining scale first, so ``1`` keeps
    only p4 and ``0`` leaves only the fused prediction.
    """
    if not 0 <= num_side <= 4:
        raise ValueError(f"supervised side scales must be in 0..4, got {num_side}")
    return list(range(5 - num_side, 5))


def multiscale_sls(
    preds: Sequence[Tensor],
    gt,
    num_side: int = 4,
    kind: str = "sls",
    location: str = "polar",
    variance: str = "population",
) -> tuple[Tensor, list[LossBreakdown]]:
    """Average loss over the supervised side predictions and the fused map.

    ``preds`` is ``(p1, p2, p3, p4, p)`` as H_i x W_i tensors where p_i is
    downsampled by ``2 ** (4 - i)``; the ground truth is max-pooled to match.
    Returns the mean and the per-prediction breakdowns (side scales in
    ascending order, fused map last).
    """
    if len(preds) != 5:
        raise ValueError(f"expected 5 predictions (p1..p4, p), got {len(preds)}")
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    h, w = gt.shape
    parts: list[LossBreakdown] = []
    for i in supervised_indices(num_side):
        f = 2 ** (4 - i)
        p = as_tensor(preds[i - 1])
        if p.shape != (h // f, w // f):
            raise ValueError(f"p{i} has shape {p.shape}, expected {(h // f, w // f)}")
        parts.append(loss_breakdown(kind, p, downsample_mask(gt, f), location, variance))
    final = as_tensor(preds[4])
    if final.shape != (h, w):
        raise ValueError(f"p has shape {final.shape}, expected {(h, w)}")
    parts.append(loss_breakdown(kind, final, gt, location, variance))
    total = parts[0].total
    for part in parts[1:]:
        total = total + part.total
    return total / float(len(parts)), parts
