"""ODE and marginal-preserving SDE samplers on a uniform Euler grid.

Flow time runs from noise (t=0) to data (t=1). The stochastic sampler is
built from :func:`sde_drift`, which is written in noise-level time
(tau = 1 - t, velocity pointing toward noise); :func:`flow_time_drift`
performs that change of variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import NonFiniteError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise level sigma(t) for the stochastic sampler.

    ``constant``: sigma = level.
    ``scaled``: sigma = level * sqrt(tau / (1 - tau)) with tau = 1 - t, which
    is finite on tau in [0, 1 - delta] and unbounded at the noise end t = 0.
    """

    kind: str = "constant"
    level: float = 0.3

    def __post_init__(self):
        if self.kind not in ("constant", "scaled"):
            raise ValueError(f"unknown noise schedule {self.kind!r}")
        if self.level < 0 or not math.isfinite(self.level):
            raise ValueError("noise level must be finite and nonnegative")

    def sigma(self, t: float) -> float:
        if self.kind == "constant":
            return float(self.level)
        if self.level == 0:
            return 0.0
        if t <= 0:
            return math.inf
        return float(self.level * math.sqrt((1.0 - t) / t))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level}


ZERO_NOISE = NoiseSchedule("constant", 0.0)


def sde_drift(v, x, t, sigma):
    """Drift v + sigma^2 / (2t) * (x + (1 - t) v) of the stochastic sampler.

    Here ``t`` is the noise level (1 = pure noise) and ``v`` the velocity in
    that time direction. The correction is singular at t = 0, so sigma must
    vanish there. ``t`` and ``sigma`` may be arrays broadcastable against ``x``.
    """
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if np.any((t == 0) & (sigma != 0)):
        raise ValueError("sigma > 0 is singular at t = 0")
    live = sigma != 0
    coef = np.divide(sigma ** 2, 2.0 * t, out=np.zeros(np.broadcast(sigma, t).shape), where=live)
    return v + coef * (x + (1.0 - t) * v)


def flow_time_drift(v, x, t, sigma):
    """Drift in flow time (t: noise -> data) via tau = 1 - t and v -> -v."""
    return -sde_drift(-np.asarray(v, dtype=float), x, 1.0 - np.asarray(t, dtype=float), sigma)


def step_mean(v, x, t, sigma, dt: float):
    """Mean of the Euler-Maruyama transition from state x at flow time t."""
    return x + dt * flow_time_drift(v, x, t, sigma)


def mean_gain(t: float, sigma: float, dt: float) -> float:
    """d(transition mean)/d(velocity) for one Euler step; a scalar times I."""
    if sigma == 0:
        return dt
    return dt * (1.0 + sigma ** 2 * t / (2.0 * (1.0 - t)))


def transition_logprob(x_next, mean, variance, dim: int | None = None):
    """Log-density of x_next under N(mean, variance * I), summed over the last axis."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    x_next = np.asarray(x_next, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if dim is not None and x_next.shape[-1] != dim:
        raise ValueError(f"expected dimension {dim}, got {x_next.shape[-1]}")
    sq = (x_next - mean) ** 2
    per_dim = -0.5 * (LOG_2PI + math.log(variance) + sq / variance)
    return per_dim.sum(axis=-1)


@dataclass
class Trajectory:
    """A batch of rollouts sharing one time grid.

    ``states`` is (n, T+1, d); ``means`` (n, T, d); ``variances``, ``sigmas``
    and ``stochastic`` are per step (T,); ``logprobs`` is (n, T) and NaN on
    deterministic steps.
    """

    times: np.ndarray
    states: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    sigmas: np.ndarray
    logprobs: np.ndarray
    stochastic: np.ndarray
    cond: np.ndarray | None = None
    seeds: tuple | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def deterministic(self) -> bool:
        return not bool(self.stochastic.any())

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx)
        return Trajectory(
            self.times, self.states[idx], self.means[idx], self.variances,
            self.sigmas, self.logprobs[idx], self.stochastic,
            None if self.cond is None else self.cond[idx],
            None if self.seeds is None else tuple(np.asarray(self.seeds, dtype=object)[idx]),
        )

    def recompute_logprobs(self) -> np.ndarray:
        out = np.full(self.logprobs.shape, np.nan)
        for k in np.flatnonzero(self.stochastic):
            out[:, k] = transition_logprob(self.states[:, k + 1], self.means[:, k], self.variances[k])
        return out


def _prepare(x0, cond, steps):
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    if cond is not None:
        cond = np.asarray(cond, dtype=float)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0])).copy()
    return x0, cond, np.linspace(0.0, 1.0, steps + 1)


def ode_sample(field, x0, cond=None, steps: int = 40) -> Trajectory:
    """Euler integration of dx = v dt from t=0 to t=1."""
    x0, cond, times = _prepare(x0, cond, steps)
    n, d = x0.shape
    dt = 1.0 / steps
    states = np.empty((n, steps + 1, d))
    means = np.empty((n, steps, d))
    states[:, 0] = x0
    x = x0
    for k in range(steps):
        v = field(x, times[k], cond)
        x = x + v * dt
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("state", k)
        means[:, k] = x
        states[:, k + 1] = x
    return Trajectory(times, states, means, np.zeros(steps), np.zeros(steps),
                      np.full((n, steps), np.nan), np.zeros(steps, dtype=bool), cond)


def trajectory_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent per-trajectory seed sequences derived from one master seed."""
    if isinstance(seed, (list, tuple)):
        if len(seed) != n:
            raise ValueError(f"need {n} seeds, got {len(seed)}")
        return [s if isinstance(s, np.random.SeedSequence) else np.random.SeedSequence(s) for s in seed]
    return np.random.SeedSequence(seed).spawn(n)


def sde_sample(field, x0, cond=None, steps: int = 40, schedule: NoiseSchedule = NoiseSchedule(),
               seed=0) -> Trajectory:
    """Euler-Maruyama rollout of the marginal-preserving SDE.

    Each step draws x_{k+1} ~ N(x_k + drift * dt, sigma_k^2 * dt * I). The
    first step (t = 0) is taken with sigma forced to zero. ``seed`` is a
    master seed or one seed per trajectory; trajectory i's noise depends only
    on its own seed, so results do not depend on batch composition.
    """
    x0, cond, times = _prepare(x0, cond, steps)
    n, d = x0.shape
    dt = 1.0 / steps
    seqs = trajectory_seeds(seed, n)
    noise = np.stack([np.random.default_rng(s).standard_normal((steps, d)) for s in seqs])

    sigmas = np.array([0.0] + [schedule.sigma(times[k]) for k in range(1, steps)])
    if not np.all(np.isfinite(sigmas)):
        raise ValueError("noise schedule is not finite on the integration grid")
    variances = sigmas ** 2 * dt
    stochastic = variances > 0

    states = np.empty((n, steps + 1, d))
    means = np.empty((n, steps, d))
    logprobs = np.full((n, steps), np.nan)
    states[:, 0] = x0
    x = x0
    for k in range(steps):
        v = field(x, times[k], cond)
        mean = step_mean(v, x, times[k], sigmas[k], dt)
        if stochastic[k]:
            x = mean + math.sqrt(variances[k]) * noise[:, k]
            logprobs[:, k] = transition_logprob(x, mean, variances[k])
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("state", k)
        means[:, k] = mean
        states[:, k + 1] = x
    return Trajectory(times, states, means, variances, sigmas, logprobs, stochastic, cond,
                      tuple(seqs))
