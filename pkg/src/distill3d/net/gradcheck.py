"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor

MAX_PARAMETERS = 5000


def analytic_gradients(params: Mapping[str, Tensor], loss: Tensor) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for k, p in params.items()}


def check_gradients(params: Mapping[str, Tensor], grid, loss_fn: Callable[..., Tensor],
                    eps: float = 1e-5) -> float:
    """Largest ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`` over all parameter entries.

    ``loss_fn(grid)`` must rebuild the loss from the current parameter values
    each time it is called.
    """
    total = sum(p.value.size for p in params.values())
    if total == 0:
        return 0.0
    if total > MAX_PARAMETERS:
        raise ValueError(f"{total} parameters; finite differences are limited to {MAX_PARAMETERS}")
    analytic = analytic_gradients(params, loss_fn(grid))
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(grid).item()
            flat[i] = orig - eps
            down = loss_fn(grid).item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            err = abs(ga[i] - fd) / max(1e-8, abs(ga[i]) + abs(fd))
            worst = max(worst, err)
    return worst
