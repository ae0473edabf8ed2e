"""Optimizers for the two parameter groups.

Adapters and heads train with Adam (additive-L2 weight decay folded into the
gradient before the moment update).  Prompt parameters train with plain SGD
whose learning rate follows a per-epoch cosine decay from ``lr0`` to 0.  Both
update ``Parameter.data`` in place and never touch frozen parameters.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Parameter
from .errors import ConfigError


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total_epochs)) / 2.

    Exactly lr0 at epoch 0 and exactly 0 at epoch == total_epochs.
    """
    if total_epochs < 1:
        raise ConfigError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Standard Adam with bias correction over a fixed parameter group."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = [p for p in params if p.trainable]
        if lr <= 0 or eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ConfigError(f"betas must lie in [0, 1): {betas}")
        if weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if self.weight_decay == 0.0 else p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGDCosine:
    """Per-epoch cosine-annealed SGD for prompt parameters.

    ``masks`` (same order as ``params``) confine updates to border entries;
    masked-out positions are forced back to exactly zero after each step.
    The learning rate is constant within an epoch; call :meth:`set_epoch`
    at each epoch boundary.
    """

    def __init__(self, params: Sequence[Parameter], lr0: float = 40.0,
                 total_epochs: int = 100,
                 masks: Sequence[np.ndarray] | None = None):
        self.params = [p for p in params if p.trainable]
        if lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if masks is not None and len(masks) != len(self.params):
            raise ConfigError("one mask per trainable prompt parameter")
        self.lr0 = float(lr0)
        self.total_epochs = int(total_epochs)
        self.masks = list(masks) if masks is not None else None
        self.lr = cosine_lr(0, self.total_epochs, self.lr0)

    def set_epoch(self, epoch: int) -> None:
        if not 0 <= epoch < self.total_epochs:
            raise ConfigError(f"epoch {epoch} outside [0, {self.total_epochs})")
        self.lr = cosine_lr(epoch, self.total_epochs, self.lr0)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            p.data -= self.lr * p.grad
            if self.masks is not None:
                p.data *= self.masks[i]
