"""AdamW with decoupled weight decay, and a parameter EMA."""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .nn import Parameter


class AdamW:
    """Holds only the parameters it may update; anything else stays frozen."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = 1.0):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameters handed to the optimizer")
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if not np.isfinite(norm):
                raise FloatingPointError("non-finite gradient norm")
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class EMA:
    """Shadow copy updated as ``shadow = d * shadow + (1 - d) * param``."""

    def __init__(self, params: Sequence[Parameter], decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.astype(np.float64) for p in self.params]

    def update(self) -> None:
        d = self.decay
        for s, p in zip(self.shadow, self.params):
            if s.shape != p.shape:
                raise ValueError("EMA shadow and parameter shapes differ")
            s *= d
            s += (1.0 - d) * p.data

    @contextlib.contextmanager
    def swapped(self):
        """Evaluate with shadow weights, restoring the live ones afterwards."""
        live = [p.data for p in self.params]
        for p, s in zip(self.params, self.shadow):
            p.data = s.astype(p.dtype)
        try:
            yield
        finally:
            for p, d in zip(self.params, live):
                p.data = d
