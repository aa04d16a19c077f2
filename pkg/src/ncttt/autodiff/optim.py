"""SGD and Adam over named parameter tensors."""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(params)
        self.lr = float(lr)
        self.t = 0

    def _grads(self) -> list[tuple[str, Tensor, np.ndarray]]:
        out = []
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient; run backward first")
            out.append((name, p, p.grad))
        return out

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        for name, p, g in grads:
            self._update(name, p, g)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _update(self, name: str, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, name, p, g):
        p.data -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _update(self, name, p, g):
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params: Mapping[str, Tensor], lr: float) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")


class MultiStepLR:
    """Divide the learning rate by ``factor`` at each milestone epoch."""

    def __init__(self, optimizer: Optimizer, milestones: list[int], factor: float = 10.0):
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {milestones}")
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.milestones = list(milestones)
        self.factor = factor

    def set_epoch(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        self.optimizer.lr = self.base_lr / self.factor ** passed
        return self.optimizer.lr
