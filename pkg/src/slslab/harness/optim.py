from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import NonFiniteError, Tensor


@dataclass
class AdagradState:
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], initial: float = 0.0) -> AdagradState:
        return cls({k: np.full(t.shape, initial, dtype=np.float64) for k, t in params.items()})


def adagrad_step(
    params: dict[str, Tensor],
    state: AdagradState,
    lr: float = 0.05,
    eps: float = 1e-10,
) -> None:
    """In-place AdaGrad update from each parameter's ``.grad``.

    ``acc += g**2``; ``param -= lr * g / (sqrt(acc) + eps)``.  A parameter with
    no gradient is left alone.
    """
    grads = {}
    for name, t in params.items():
        if t.grad is None:
            continue
        if t.grad.shape != t.shape:
            raise ValueError(f"{name}: gradient shape {t.grad.shape} != {t.shape}")
        if not np.isfinite(t.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        grads[name] = t.grad
    for name, g in grads.items():
        acc = state.accumulators.setdefault(name, np.zeros_like(g))
        acc += g * g
        denom = np.sqrt(acc) + eps
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        params[name].data -= lr * step
