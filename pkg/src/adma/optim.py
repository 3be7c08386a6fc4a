"""Adam with bias correction."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple = BETAS,
    eps: float = EPS,
) -> AdamState:
    """Update ``params`` in place and advance ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots"
        )
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != state.m[i].shape or np.shape(g) != p.shape:
            raise ShapeError(
                f"adam_step: param {p.name or i} has shape {p.shape}, "
                f"grad {np.shape(g)}, state {state.m[i].shape}"
            )
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.isfinite(new).all():
            raise NonFiniteError(f"adam_step produced non-finite values in {p.name or i}")
        state.m[i], state.v[i] = m, v
        p.data = new
    state.step = t
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)
