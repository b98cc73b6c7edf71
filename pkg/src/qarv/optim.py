"""Adam with bias correction, joint gradient-norm clipping, and EMA shadows."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Parameter


class NumericsError(RuntimeError):
    """Raised when NaN/Inf shows up where the math guarantees finiteness."""


def clip_global_norm(params: Sequence[Parameter], max_norm: float = 2.0) -> float:
    """Rescale all gradients jointly if their global L2 norm exceeds max_norm.

    Returns the pre-clip norm.  NaN gradients abort the step.
    """
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient for parameter {p.name!r}")
        total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam over a fixed parameter list; one shared step counter."""

    def __init__(self, params: Sequence[Parameter], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {p.name!r}")
            g = g.astype(m.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype, copy=False)


class EmaTracker:
    """Exponential moving average of parameter values.

    shadow <- decay * shadow + (1 - decay) * value, initialized at the
    current values.
    """

    def __init__(self, params: Sequence[Parameter], decay: float = 0.9999):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        self.decay = decay
        self.params = list(params)
        self.shadow = [p.data.copy() for p in self.params]

    def update(self) -> None:
        d = self.decay
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def copy_to_params(self) -> None:
        for s, p in zip(self.shadow, self.params):
            p.data = s.copy()
