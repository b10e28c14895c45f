"""Ranger-style optimisation: adaptive moments with optional variance
rectification, wrapped in Lookahead, driven by a cosine-annealed rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Half-cosine decay from ``base_lr`` to ``min_lr``; steps past the end clamp."""
    if total_steps <= 0 or step >= total_steps:
        return float(min_lr)
    step = max(step, 0)
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    rectify: bool = True
    lookahead: bool = True
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.base_lr > self.min_lr >= 0:
            if not (self.base_lr == 0 and self.min_lr == 0):
                raise ValueError("need base_lr > min_lr >= 0")
        if self.lookahead_k < 1:
            raise ValueError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ValueError("lookahead_alpha must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class Ranger:
    """Rectified Adam inner steps with Lookahead slow weights.

    ``step`` updates the parameter arrays in place.  With ``rectify`` on, the
    first few steps (while the variance estimate is unreliable) fall back to
    bias-corrected momentum, as in RAdam.
    """

    def __init__(self, params: dict, config: OptimizerConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.slow = {k: p.data.copy() for k, p in params.items()} if config.lookahead else None

    def step(self, grads: dict, lr: float) -> None:
        cfg = self.config
        step = self.t + 1
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k} at step {step}")
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        self.t = step
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** step
        bc2 = 1.0 - b2 ** step
        rect = None
        if cfg.rectify:
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho = rho_inf - 2.0 * step * b2 ** step / bc2
            if rho > 4.0:
                rect = math.sqrt((rho - 4) * (rho - 2) * rho_inf
                                 / ((rho_inf - 4) * (rho_inf - 2) * rho))
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            if cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            if cfg.rectify and rect is None:
                p.data -= lr * m_hat
            else:
                r = 1.0 if rect is None else rect
                p.data -= lr * r * m_hat / (np.sqrt(v / bc2) + cfg.eps)
        if self.slow is not None and step % cfg.lookahead_k == 0:
            a = cfg.lookahead_alpha
            for k, p in self.params.items():
                slow = self.slow[k]
                slow += a * (p.data - slow)
                p.data[...] = slow
