"""Central finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Graph, Tensor


def grad_check(params: list[Tensor], loss_fn: Callable[[], Tensor], eps: float = 1e-6,
               samples_per_param: int | None = 8, rng: np.random.Generator | None = None) -> float:
    """Max over sampled entries of ``|analytic - central| / max(1, |analytic|)``.

    ``loss_fn`` must rebuild the loss from the current parameter values on every
    call. ``samples_per_param=None`` checks every entry.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_param, replace=False)
        af = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(af[i] - num) / max(1.0, abs(af[i])))
    return worst
