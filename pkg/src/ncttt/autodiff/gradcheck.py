"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> float:
    """Max over all coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``loss_fn`` must be a pure function of the current parameter values: any
    randomness or BatchNorm running-stat updates inside it must be frozen by
    the caller, otherwise the two routes see different functions.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"h must lie in (0, 1e-3], got {h}")
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
        p.grad = None
    return worst
