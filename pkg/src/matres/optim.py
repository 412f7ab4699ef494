"""Adam with decoupled weight decay (AdamW)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .params import Parameter
from .tensor import ShapeError


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamW:
    """AdamW over a fixed list of trainable parameters.

    Decay is applied as ``p -= lr * weight_decay * p`` before the adaptive
    step.  Parameters missing from the gradient map are left alone unless
    ``decay_without_grad`` is set, in which case they only decay.
    """

    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_without_grad: bool = False
    state: dict[str, _Moments] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for p in self.params:
            if not p.trainable:
                raise ValueError(f"parameter {p.name!r} is frozen and cannot be optimized")
            self.state[p.name] = _Moments(np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                if self.decay_without_grad and self.weight_decay:
                    p.data = p.data - self.lr * self.weight_decay * p.data
                continue
            g = np.asarray(g)
            if g.shape != p.shape:
                raise ShapeError("optimizer_step", f"grad for {p.name!r} has shape {g.shape}, param {p.shape}")
            s = self.state[p.name]
            s.t += 1
            s.m = self.beta1 * s.m + (1 - self.beta1) * g
            s.v = self.beta2 * s.v + (1 - self.beta2) * g * g
            m_hat = s.m / (1 - self.beta1 ** s.t)
            v_hat = s.v / (1 - self.beta2 ** s.t)
            decayed = p.data - self.lr * self.weight_decay * p.data
            p.data = (decayed - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)
