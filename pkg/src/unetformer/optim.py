"""AdamW optimizer with decoupled weight decay, plus the cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .nn import Parameter


class AdamW:
    """Adam with weight decay applied directly to the parameters.

    Each step first shrinks the parameter by `lr * weight_decay`, then takes
    the bias-corrected moment update. State (`m`, `v`, per-parameter step
    count) is keyed by parameter name so it can round-trip a checkpoint.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0 <= betas[0] < 1 or not 0 <= betas[1] < 1:
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        self.params: list[tuple[str, Parameter]] = list(named_params)
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = {name: 0 for name, _ in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        b1, b2 = self.betas
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from `base_lr` at step 0 to 0 at `total_steps`."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    step = min(step, total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
