"""Finite-difference checks of every loss and of the end-to-end network loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .losses import (
    dice_loss,
    location_loss_variant,
    multiscale_sls,
    scale_sensitive_loss,
    sls_loss,
    soft_iou_loss,
)
from .mshnet import UNetConfig, build, forward
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
STEP = 1e-5


def random_pair(rng: np.random.Generator, shape=(8, 8)) -> tuple[np.ndarray, np.ndarray]:
    """Soft prediction in (0.05, 0.95) and a non-empty binary mask."""
    pred = rng.uniform(0.05, 0.95, shape)
    gt = (rng.random(shape) < 0.3).astype(np.float64)
    if gt.sum() == 0:
        gt[rng.integers(shape[0]), rng.integers(shape[1])] = 1.0
    return pred, gt


def _pair_suite(fn: Callable[[Tensor, np.ndarray], Tensor]) -> Callable[[np.random.Generator], float]:
    def run(rng):
        pred, gt = random_pair(rng)
        return grad_check(lambda x: fn(x, gt), Tensor(pred), STEP)

    return run


def _multiscale(rng: np.random.Generator, coords_per_map: int = 5) -> float:
    size = 16
    shapes = [(size // 2 ** (4 - i),) * 2 for i in (1, 2, 3, 4)] + [(size, size)]
    gt = np.zeros((size, size))
    r, c = rng.integers(2, size - 4, 2)
    gt[r : r + rng.integers(1, 4), c : c + rng.integers(1, 4)] = 1.0
    flat = np.concatenate([rng.uniform(0.05, 0.95, s).ravel() for s in shapes])
    bounds = np.cumsum([0] + [a * b for a, b in shapes])

    def f(x):
        preds = [x[bounds[i] : bounds[i + 1]].reshape(shapes[i]) for i in range(5)]
        return multiscale_sls(preds, gt)[0]

    # sample a few coordinates from every map; the full sweep is ~340 coordinates
    coords = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        coords += [int(c) for c in rng.choice(np.arange(lo, hi), min(coords_per_map, hi - lo), replace=False)]
    return grad_check(f, Tensor(flat), STEP, coords=coords)


def _mshnet(rng: np.random.Generator, coords_per_trial: int = 6) -> float:
    cfg = UNetConfig(
        input_size=(16, 16),
        base_channels=2,
        channel_multipliers=(4, 2, 2, 1),
        seed=int(rng.integers(1 << 31)),
        instance_norm=bool(rng.integers(2)),
        head_bias=-2.0,
    )
    params = build(cfg)
    image = Tensor(rng.random((1, 1, 16, 16)))
    gt = np.zeros((16, 16))
    r, c = rng.integers(1, 12, 2)
    gt[r : r + 3, c : c + 3] = 1.0
    names = sorted(params.tensors)
    target = params.tensors[names[rng.integers(len(names))]]
    coords = rng.choice(target.size, size=min(coords_per_trial, target.size), replace=False)

    def f(_):
        out = forward(params, image)
        return multiscale_sls([p[0, 0] for p in out.as_tuple()], gt)[0]

    return grad_check(f, target, STEP, coords=[int(i) for i in coords])


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "soft_iou_loss": _pair_suite(soft_iou_loss),
    "dice_loss": _pair_suite(dice_loss),
    "scale_sensitive_loss": _pair_suite(scale_sensitive_loss),
    "location_polar": _pair_suite(lambda p, g: location_loss_variant(p, g, "polar")),
    "location_L1": _pair_suite(lambda p, g: location_loss_variant(p, g, "L1")),
    "location_L2": _pair_suite(lambda p, g: location_loss_variant(p, g, "L2")),
    "sls_loss": _pair_suite(lambda p, g: sls_loss(p, g).total),
    "multiscale_sls": _multiscale,
    "mshnet_end_to_end": _mshnet,
}


def run_suite(name: str, trials: int = 50, seed: int = 0) -> float:
    """Largest relative error over ``trials`` random instances."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    rng = np.random.default_rng([seed, sorted(SUITES).index(name)])
    return max(SUITES[name](rng) for _ in range(trials))


def run_all(trials: int = 50, seed: int = 0) -> dict[str, float]:
    return {name: run_suite(name, trials, seed) for name in SUITES}
