"""Group-relative policy optimization for flow samplers."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flow import SGD, NonFiniteError
from .rewards import Scorer, normalize_reward, score_many
from .sampling import NoiseSchedule, Trajectory, mean_gain, sde_sample, step_mean
from .cases import Condition, EditCase, EditTask, point_ref

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


def compute_group_advantages(rewards) -> np.ndarray:
    """(R - mean) / std over the group, population std; all zeros if the spread vanishes."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered ** 2)))
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return centered / std


def importance_ratio(logp_new, logp_old):
    logp_new = np.asarray(logp_new, dtype=float)
    logp_old = np.asarray(logp_old, dtype=float)
    if not (np.all(np.isfinite(logp_new)) and np.all(np.isfinite(logp_old))):
        raise ValueError("log-probabilities must be finite")
    out = np.exp(logp_new - logp_old)
    return float(out) if out.ndim == 0 else out


def clipped_term(ratio, advantage, epsilon: float):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A)."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    ratio = np.asarray(ratio, dtype=float)
    if np.any(ratio < 0):
        raise ValueError("ratio must be nonnegative")
    advantage = np.asarray(advantage, dtype=float)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)
    return float(out) if out.ndim == 0 else out


def clipped_term_grad(ratio, advantage, epsilon: float):
    """d clipped_term / d ratio: A where the unclipped branch is active, else 0."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    clipped_away = ((ratio > 1 + epsilon) & (advantage > 0)) | ((ratio < 1 - epsilon) & (advantage < 0))
    return np.where(clipped_away, 0.0, advantage)


def gaussian_step_kl(mean_p, mean_q, variance: float, dim: int | None = None):
    """KL(N(mean_p, var I) || N(mean_q, var I)) = |mean_p - mean_q|^2 / (2 var)."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    diff = np.asarray(mean_p, dtype=float) - np.asarray(mean_q, dtype=float)
    if dim is not None and diff.shape[-1] != dim:
        raise ValueError(f"expected dimension {dim}, got {diff.shape[-1]}")
    out = np.sum(diff ** 2, axis=-1) / (2.0 * variance)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PolicySnapshot:
    params: np.ndarray
    tag: str

    @classmethod
    def capture(cls, policy, tag: str) -> "PolicySnapshot":
        if tag not in ("old", "reference"):
            raise ValueError(f"unknown snapshot tag {tag!r}")
        p = np.array(policy.params, dtype=float)
        p.setflags(write=False)
        return cls(p, tag)


@dataclass
class GrpoConfig:
    group_size: int = 8
    epsilon: float = 0.2
    kl_weight: float = 0.01
    steps: int = 40
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    lr: float = 0.5
    momentum: float = 0.0
    max_grad_norm: float | None = None
    iterations: int = 300
    groups_per_iteration: int = 16
    alpha: float = 2.0
    beta: float = 5.0
    workers: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.iterations < 0 or self.groups_per_iteration < 1:
            raise ValueError("iterations must be >= 0 and groups_per_iteration >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def metadata(self) -> dict:
        return {
            "group_size": self.group_size,
            "epsilon": self.epsilon,
            "kl_weight": self.kl_weight,
            "kl_estimator": "closed-form gaussian, averaged over stochastic steps",
            "steps": self.steps,
            "schedule": self.schedule.to_dict(),
            "lr": self.lr,
            "momentum": self.momentum,
            "max_grad_norm": self.max_grad_norm,
            "iterations": self.iterations,
            "groups_per_iteration": self.groups_per_iteration,
            "alpha": self.alpha,
            "beta": self.beta,
            "seed": self.seed,
        }


@dataclass
class RolloutGroup:
    condition: Condition
    trajectories: Trajectory
    scores: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray = None

    def __post_init__(self):
        g = len(self.trajectories)
        if g < 2:
            raise ValueError("a group needs at least two trajectories")
        if len(self.rewards) != g:
            raise ValueError("rewards and trajectories differ in length")
        if self.advantages is None:
            self.advantages = compute_group_advantages(self.rewards)
        elif len(self.advantages) != g:
            raise ValueError("advantages and trajectories differ in length")


@dataclass
class ObjectiveValue:
    value: float
    grad: np.ndarray
    mean_kl: float
    mean_ratio: float
    clip_fraction: float


def _stack(groups: Sequence[RolloutGroup]):
    first = groups[0].trajectories
    for g in groups:
        tr = g.trajectories
        if tr.steps != first.steps or not np.array_equal(tr.times, first.times) \
                or not np.array_equal(tr.variances, first.variances):
            raise ValueError("all trajectories must share one time grid and noise schedule")
    states = np.concatenate([g.trajectories.states for g in groups])
    logp_old = np.concatenate([g.trajectories.logprobs for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    conds = [g.trajectories.cond for g in groups]
    cond = None if conds[0] is None else np.concatenate(conds)
    return first, states, logp_old, adv, cond


def grpo_objective(groups, policy, ref: PolicySnapshot, cfg: GrpoConfig,
                   old: PolicySnapshot | None = None) -> ObjectiveValue:
    """Clipped surrogate minus KL to the reference, and its gradient.

    Averages over every trajectory in ``groups`` and over every stochastic
    step. New transition means are recomputed from the stored states with
    the current parameters; old log-probabilities come from the rollout.
    When ``old`` is given they are recomputed from that snapshot instead.
    """
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    grid, states, logp_old, adv, cond = _stack(groups)
    ks = np.flatnonzero(grid.stochastic)
    if ks.size == 0:
        raise ValueError("trajectories have no stochastic steps")
    n, _, d = states.shape
    dt = grid.dt

    # flatten (trajectory, step) pairs into one network batch
    x = states[:, ks].reshape(-1, d)
    x_next = states[:, ks + 1].reshape(-1, d)
    t = np.repeat(grid.times[ks][None, :], n, axis=0).ravel()
    sig = np.repeat(grid.sigmas[ks][None, :], n, axis=0).ravel()
    var = np.repeat(grid.variances[ks][None, :], n, axis=0).ravel()
    c = None if cond is None else np.repeat(cond, ks.size, axis=0)
    a = np.repeat(adv, ks.size)

    def means_for(v):
        return step_mean(v, x, t[:, None], sig[:, None], dt)

    v_new, cache = policy.forward(x, t, c)
    m_new = means_for(v_new)
    m_ref = means_for(policy.forward(x, t, c, params=ref.params)[0])
    if old is not None:
        m_old = means_for(policy.forward(x, t, c, params=old.params)[0])
        lp_old = _logp(x_next, m_old, var)
    else:
        lp_old = logp_old[:, ks].ravel()
    lp_new = _logp(x_next, m_new, var)
    ratio = np.exp(lp_new - lp_old)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError("importance ratio", 0)

    surrogate = clipped_term(ratio, a, cfg.epsilon)
    kl = np.sum((m_new - m_ref) ** 2, axis=1) / (2.0 * var)
    per_pair = surrogate - cfg.kl_weight * kl
    scale = 1.0 / (n * ks.size)
    value = float(per_pair.sum() * scale)

    # chain rule back to the velocity output
    d_ratio = clipped_term_grad(ratio, a, cfg.epsilon) * ratio
    d_mean = d_ratio[:, None] * (x_next - m_new) / var[:, None]
    d_mean -= cfg.kl_weight * (m_new - m_ref) / var[:, None]
    gain = np.array([mean_gain(ti, si, dt) for ti, si in zip(t, sig)])
    d_v = scale * gain[:, None] * d_mean
    grad = policy.backward(cache, d_v)
    lo, hi = 1 - cfg.epsilon, 1 + cfg.epsilon
    return ObjectiveValue(value, grad, float(kl.mean()), float(ratio.mean()),
                          float(np.mean((ratio < lo) | (ratio > hi))))


def _logp(x_next, mean, var):
    d = x_next.shape[1]
    return -0.5 * (d * np.log(2 * np.pi * var) + np.sum((x_next - mean) ** 2, axis=1) / var)


@dataclass
class IterationRecord:
    iteration: int
    mean_reward: float
    mean_score: float
    kl: float
    groups_used: int
    groups_skipped: int


@dataclass
class PostTrainResult:
    policy: object
    curve: list[IterationRecord]
    skipped: list[tuple[int, str, str]]
    metadata: dict


def _toy_case(cond: Condition, tag: str, point: np.ndarray) -> EditCase:
    return EditCase(
        id=tag,
        task=cond.task or EditTask.ADDITION,
        instruction=cond.instruction,
        output_ref=point_ref(point),
        terminal_point=tuple(float(v) for v in point),
    )


def rollout_groups(policy, conditions: Sequence[Condition], iteration: int, cfg: GrpoConfig):
    """Sample ``groups_per_iteration`` groups of ``group_size`` SDE rollouts."""
    gpi, gsize = cfg.groups_per_iteration, cfg.group_size
    picked = [conditions[(iteration * gpi + j) % len(conditions)] for j in range(gpi)]
    keys = [(cfg.seed, iteration, j, i) for j in range(gpi) for i in range(gsize)]
    x0 = np.stack([np.random.default_rng([*k, 0]).standard_normal(policy.dim) for k in keys])
    seqs = [np.random.SeedSequence([*k, 1]) for k in keys]
    if policy.cond_dim:
        cond = np.repeat(np.stack([np.asarray(c.embedding, dtype=float) for c in picked]), gsize, axis=0)
    else:
        cond = None
    traj = sde_sample(policy, x0, cond, cfg.steps, cfg.schedule, seed=seqs)
    return picked, traj


def post_train(policy, conditions: Sequence[Condition], reward_model: Scorer, cfg: GrpoConfig,
               prompts=None, on_iteration: Callable[[IterationRecord], None] | None = None
               ) -> PostTrainResult:
    """Online GRPO: roll out, score, normalize, take one ascent step per iteration."""
    if not conditions:
        raise ValueError("need at least one condition")
    policy = policy.copy()
    ref = PolicySnapshot.capture(policy, "reference")
    opt = SGD(cfg.lr, cfg.momentum, cfg.max_grad_norm)
    curve: list[IterationRecord] = []
    skipped: list[tuple[int, str, str]] = []
    gsize = cfg.group_size
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.iterations):
            picked, traj = rollout_groups(policy, conditions, it, cfg)
            cases = [_toy_case(picked[j // gsize], f"{picked[j // gsize].id}/{it}/{j}", traj.terminal[j])
                     for j in range(len(traj))]
            task_prompts = None
            if prompts is not None:
                task_prompts = [prompts[c.task] for c in cases]
            scores, failures = score_many(reward_model, cases, task_prompts, pool=pool)
            bad_groups = {}
            for idx, err in failures:
                bad_groups.setdefault(idx // gsize, repr(err))
            groups = []
            for j, cond in enumerate(picked):
                if j in bad_groups:
                    skipped.append((it, cond.id, bad_groups[j]))
                    logger.warning("iteration %d: skipping group %s: %s", it, cond.id, bad_groups[j])
                    continue
                sl = slice(j * gsize, (j + 1) * gsize)
                s = np.asarray(scores[sl], dtype=float)
                r = normalize_reward(s, cfg.alpha, cfg.beta)
                groups.append(RolloutGroup(cond, traj.subset(np.arange(sl.start, sl.stop)), s, r))
            if not groups:
                rec = IterationRecord(it, math.nan, math.nan, math.nan, 0, len(picked))
            else:
                obj = grpo_objective(groups, policy, ref, cfg)
                if not np.all(np.isfinite(obj.grad)):
                    raise NonFiniteError("gradient", it)
                policy.params = opt.step(policy.params, obj.grad, ascent=True)
                rec = IterationRecord(
                    it,
                    float(np.mean([g.rewards.mean() for g in groups])),
                    float(np.mean([g.scores.mean() for g in groups])),
                    obj.mean_kl,
                    len(groups),
                    len(picked) - len(groups),
                )
            curve.append(rec)
            if on_iteration is not None:
                on_iteration(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return PostTrainResult(policy, curve, skipped, cfg.metadata())


def block_means(values, block: int) -> np.ndarray:
    """Non-overlapping block averages, the smoothing used for reward curves."""
    v = np.asarray(values, dtype=float)
    n = len(v) // block
    return v[: n * block].reshape(n, block).mean(axis=1)


def mode_mass(points, center_a, center_b) -> float:
    """Fraction of points closer to ``center_a`` than to ``center_b``."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    da = np.linalg.norm(p - np.asarray(center_a, dtype=float), axis=1)
    db = np.linalg.norm(p - np.asarray(center_b, dtype=float), axis=1)
    return float(np.mean(da < db))
