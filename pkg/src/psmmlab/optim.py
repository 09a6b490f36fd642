"""Adam with a step-wise learning-rate schedule."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """Bias-corrected Adam over an ordered list of parameters.

    The learning rate is ``lr * decay_factor ** k`` where ``k`` counts the
    entries of ``decay_epochs`` that are ``<= epoch``; call :meth:`set_epoch`
    at each epoch boundary.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.1,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        decay_epochs: Sequence[int] = (15, 20),
        decay_factor: float = 0.1,
    ):
        self.params = list(params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_epochs = tuple(sorted(decay_epochs))
        self.decay_factor = decay_factor
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.epoch = 0

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.base_lr * self.decay_factor**k

    @property
    def lr(self) -> float:
        return self.lr_at(self.epoch)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def step(self):
        self.t += 1
        lr = self.lr
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
