"""SGD-with-momentum and Adam optimizers plus the poly learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerState:
    """Per-network optimizer buffers.

    ``sgd-momentum``: ``v <- mu*v + (g + wd*w)``; ``w <- w - lr*v``.
    ``adaptive-moments``: Adam with bias correction, ``eps`` added to the
    corrected root second moment.
    """

    kind: str
    base_lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    buffers: dict[int, list[np.ndarray]] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adaptive-moments"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(base_lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> OptimizerState:
    return OptimizerState("sgd-momentum", base_lr, weight_decay=weight_decay, momentum=momentum)


def adam(base_lr: float, betas=(0.9, 0.99), weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("adaptive-moments", base_lr, weight_decay=weight_decay, betas=tuple(betas))


def optimizer_step(state: OptimizerState, params: list[Tensor], lr: float) -> None:
    """Apply one update to ``params`` in place, then clear their gradients.

    Buffers are keyed by position in ``params``, so callers must pass the same
    parameter list in the same order every time.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '?'} has no gradient")
    state.steps += 1
    t = state.steps
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.kind == "sgd-momentum":
            buf = state.buffers.get(i)
            if buf is None:
                buf = state.buffers[i] = [np.zeros_like(p.data)]
            v = buf[0]
            v *= state.momentum
            v += g
            p.data -= lr * v
        else:
            buf = state.buffers.get(i)
            if buf is None:
                buf = state.buffers[i] = [np.zeros_like(p.data), np.zeros_like(p.data)]
            m, s = buf
            b1, b2 = state.betas
            m *= b1
            m += (1 - b1) * g
            s *= b2
            s += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            shat = s / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(shat) + state.eps)
        p.grad = None


def poly_lr(base_lr: float, iter: int, max_iters: int, power: float = 0.9) -> float:
    if max_iters <= 0:
        raise ContractError("poly_lr needs max_iters > 0")
    if not 0 <= iter <= max_iters:
        raise ContractError(f"iter {iter} outside [0, {max_iters}]")
    return base_lr * (1.0 - iter / max_iters) ** power
