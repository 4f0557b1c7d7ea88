"""Rectified-flow training: interpolation, flow-matching loss and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Raised when a loss or state turns NaN/Inf; ``step`` names where."""

    def __init__(self, what: str, step: int):
        super().__init__(f"non-finite {what} at step {step}")
        self.what = what
        self.step = step


def interpolate(x0, x1, t):
    """Point on the straight path from x0 (t=0) to x1 (t=1)."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ValueError(f"dimension mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def flow_matching_loss(field, x0, x1, t, cond=None, with_grad=True):
    """Mean squared error between v(x_t, t, c) and the displacement x1 - x0.

    Returns ``(loss, grad)``; ``grad`` is w.r.t. ``field.params`` and is
    ``None`` when ``with_grad`` is false or the field has no parameters.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=float), (x0.shape[0],))
    xt = interpolate(x0, x1, t)
    target = x1 - x0
    n = x0.shape[0]
    if with_grad and hasattr(field, "forward"):
        v, cache = field.forward(xt, t, cond)
        resid = v - target
        loss = float(np.sum(resid ** 2) / n)
        return loss, field.backward(cache, 2.0 * resid / n)
    resid = field(xt, t, cond) - target
    return float(np.sum(resid ** 2) / n), None


@dataclass
class SGD:
    """Heavy-ball momentum SGD on a flat parameter vector."""

    lr: float
    momentum: float = 0.9
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        self._velocity = None

    def step(self, params: np.ndarray, grad: np.ndarray, ascent: bool = False) -> np.ndarray:
        g = np.asarray(grad, dtype=float)
        if self.max_grad_norm is not None:
            norm = float(np.linalg.norm(g))
            if norm > self.max_grad_norm:
                g = g * (self.max_grad_norm / norm)
        if ascent:
            g = -g
        if self._velocity is None:
            self._velocity = np.zeros_like(g)
        self._velocity = self.momentum * self._velocity + g
        return params - self.lr * self._velocity


@dataclass
class TrainConfig:
    steps: int
    lr: float
    momentum: float = 0.9
    batch_size: int = 256
    max_grad_norm: float | None = None
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainResult:
    field: object
    losses: list[float]

    def smoothed_final_loss(self, window: int = 50) -> float:
        return float(np.mean(self.losses[-window:]))


PairSampler = Callable[[np.random.Generator, int], tuple]


def train_flow(field, sampler: PairSampler, config: TrainConfig,
               on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit ``field`` by flow matching on pairs drawn from ``sampler``.

    ``sampler(rng, n)`` returns ``(x0, x1, cond)`` with ``cond`` possibly None.
    The input field is not modified; a trained copy is returned.
    """
    field = field.copy()
    rng = np.random.default_rng(config.seed)
    opt = SGD(config.lr, config.momentum, config.max_grad_norm)
    losses: list[float] = []
    for step in range(config.steps):
        x0, x1, cond = sampler(rng, config.batch_size)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        if config.lr_schedule == "cosine":
            opt.lr = 0.5 * config.lr * (1.0 + np.cos(np.pi * step / config.steps))
        loss, grad = flow_matching_loss(field, x0, x1, t, cond)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NonFiniteError("loss", step)
        field.params = opt.step(field.params, grad)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if step % 500 == 0:
            logger.debug("flow step %d loss %.5f", step, loss)
    return TrainResult(field, losses)
