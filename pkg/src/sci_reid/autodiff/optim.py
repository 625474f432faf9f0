"""Adam and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if any(g is None for g in grads):
        raise ContractError("adam_step called with a missing gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


class Adam:
    """Thin stateful wrapper over :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"parameters without gradient: {missing}")
        adam_step(self.params, [p.grad for p in self.params], self.state)


@dataclass
class LrSchedule:
    kind: str = "cosine"
    base_lr: float = 3.5e-4
    total_epochs: int = 30
    milestones: Sequence[int] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step"):
            raise ContractError(f"unknown schedule kind {self.kind!r}; expected 'cosine' or 'step'")

    def __call__(self, epoch: int) -> float:
        if self.kind == "cosine":
            if self.total_epochs <= 0:
                return self.base_lr
            return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.total_epochs))
        n = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.decay_factor ** n
