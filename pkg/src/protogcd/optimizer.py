"""Projected momentum SGD with a cosine learning-rate schedule, plus the
finite-difference gradient checker used throughout the test suite.

Prototype rows are re-normalized to the unit sphere after every update
(post-step projection, first-order equivalent to a Riemannian retraction
at these step sizes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NonFiniteError
from .model import ModelParams
from .sphere import normalize_rows


@dataclass
class OptimizerConfig:
    lr0: float = 0.1
    lr_min: float | None = None  # None -> lr0 * 1e-3
    momentum: float = 0.9
    total_epochs: int = 200
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.lr_min is None:
            self.lr_min = self.lr0 * 1e-3
        if not (0.0 <= self.lr_min <= self.lr0):
            raise ConfigError("need 0 <= lr_min <= lr0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be nonnegative")


def cosine_lr(epoch: int, cfg: OptimizerConfig) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / E)) / 2."""
    if epoch < 0 or epoch > cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.total_epochs == 0:
        return cfg.lr0
    frac = epoch / cfg.total_epochs
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


class SgdOptimizer:
    """Momentum SGD over ModelParams with prototype sphere projection."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self._velocity: dict[str, np.ndarray] | None = None

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
        """Apply one update in place; returns the same params object."""
        arrays = params.arrays()
        g_arrays = grads.arrays()
        for name, g in g_arrays.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name}")
        if self._velocity is None:
            self._velocity = {k: np.zeros_like(v) for k, v in arrays.items()}
        for name, p in arrays.items():
            g = g_arrays[name]
            if self.cfg.weight_decay > 0:
                g = g + self.cfg.weight_decay * p
            v = self._velocity[name]
            v *= self.cfg.momentum
            v += g
            p -= lr * v
        params.prototypes[...] = normalize_rows(params.prototypes)
        return params


def finite_diff_check(loss_fn: Callable[[ModelParams], tuple[float, ModelParams]],
                      params: ModelParams, probes: int = 20, h: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(params) -> (value, gradients)``; ``probes`` random coordinates
    are perturbed by +/-h.  Error per probe is
    |analytic - numeric| / max(|numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = loss_fn(params)
    names = list(params.arrays().keys())
    worst = 0.0
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        arr = params.arrays()[name]
        idx = rng.integers(arr.size)
        coord = np.unravel_index(idx, arr.shape)

        def value_at(offset: float) -> float:
            probe = params.copy()
            probe.arrays()[name][coord] += offset
            value, _ = loss_fn(probe)
            if not np.isfinite(value):
                raise NonFiniteError(
                    f"non-finite loss at probe {name}{coord} offset {offset}")
            return value

        numeric = (value_at(+h) - value_at(-h)) / (2 * h)
        analytic = grads.arrays()[name][coord]
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
    return worst
