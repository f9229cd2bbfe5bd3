"""Optimizers and learning-rate schedules.

The step functions operate on plain arrays so they can be tested without a
graph; :class:`Optimizer` binds them to a module's parameter tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class SGDMomentum:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class AdamKind:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    kind: SGDMomentum | AdamKind
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def create(cls, kind, params: list[np.ndarray]) -> "OptimizerState":
        state = cls(kind)
        state.first = [np.zeros_like(p) for p in params]
        if isinstance(kind, AdamKind):
            state.second = [np.zeros_like(p) for p in params]
        return state


def _check(state: OptimizerState, params, grads) -> None:
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ContractError("optimizer: parameter/gradient/buffer counts differ")
    for p, g, m in zip(params, grads, state.first):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"optimizer: shape mismatch {p.shape} / {g.shape} / {m.shape}")


def sgd_momentum_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """In-place ``v <- momentum*v + g; p <- p - lr*v``. Returns ``params``."""
    _check(state, params, grads)
    k = state.kind
    for p, g, v in zip(params, grads, state.first):
        if k.weight_decay:
            g = g + k.weight_decay * p
        v *= k.momentum
        v += g
        p -= k.lr * v
    state.step_count += 1
    return params


def adam_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """In-place bias-corrected Adam update (L2 weight decay added to the gradient)."""
    _check(state, params, grads)
    k = state.kind
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - k.beta1 ** t
    c2 = 1.0 - k.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if k.weight_decay:
            g = g + k.weight_decay * p
        m *= k.beta1
        m += (1 - k.beta1) * g
        v *= k.beta2
        v += (1 - k.beta2) * g * g
        p -= (k.lr * (m / c1) / (np.sqrt(v / c2) + k.eps)).astype(p.dtype)
    return params


class Optimizer:
    def __init__(self, params, kind: SGDMomentum | AdamKind):
        self.params = list(params)
        self.state = OptimizerState.create(kind, [p.data for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.kind.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.kind.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        arrays = [p.data for p in self.params]
        if isinstance(self.state.kind, AdamKind):
            adam_step(self.state, arrays, grads)
        else:
            sgd_momentum_step(self.state, arrays, grads)


@dataclass(frozen=True)
class StepSchedule:
    milestones: tuple[int, ...] = (60, 80)
    gamma: float = 0.1
    total_epochs: int | None = None


@dataclass(frozen=True)
class CosineSchedule:
    total_epochs: int


def schedule_lr(kind: StepSchedule | CosineSchedule, base_lr: float, epoch: int) -> float:
    total = kind.total_epochs
    if epoch < 0 or (total is not None and epoch >= total):
        raise ContractError(f"epoch {epoch} outside [0, {total})")
    if isinstance(kind, CosineSchedule):
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))
    passed = sum(1 for m in kind.milestones if epoch >= m)
    return base_lr * kind.gamma ** passed
