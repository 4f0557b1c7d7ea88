"""Low-dimensional target distributions and synthetic editing cases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cases import EditCase, TASK_ORDER
from .datapipe import CategoryProfile


@dataclass(frozen=True)
class GaussianMixture:
    centers: tuple[tuple[float, ...], ...]
    std: float
    weights: tuple[float, ...] | None = None
    stratified: bool = True

    @property
    def dim(self) -> int:
        return len(self.centers[0])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        c = np.asarray(self.centers, dtype=float)
        w = np.full(len(c), 1.0 / len(c)) if self.weights is None else \
            np.asarray(self.weights, dtype=float) / np.sum(self.weights)
        if self.stratified:
            # fixed component counts per batch, random order
            counts = np.floor(w * n).astype(int)
            rest = rng.choice(len(c), size=n - counts.sum(), p=w, replace=True)
            k = rng.permutation(np.concatenate([np.repeat(np.arange(len(c)), counts), rest]))
        else:
            k = rng.choice(len(c), size=n, p=w)
        return c[k] + self.std * rng.standard_normal((n, c.shape[1]))


def two_mode_mixture(separation: float = 4.0, std: float = 0.5) -> GaussianMixture:
    """Equal-weight modes at (+s/2, 0) (mode A) and (-s/2, 0) (mode B)."""
    h = separation / 2.0
    return GaussianMixture(((h, 0.0), (-h, 0.0)), std)


def point_mass(point) -> GaussianMixture:
    return GaussianMixture((tuple(float(v) for v in point),), 0.0)


def pair_sampler(target: GaussianMixture):
    """Independent coupling: x0 ~ N(0, I), x1 ~ target."""

    def sample(rng: np.random.Generator, n: int):
        x0 = rng.standard_normal((n, target.dim))
        return x0, target.sample(rng, n), None

    return sample


def make_synthetic_cases(n: int, profile: CategoryProfile, center=(2.0, 0.0), spread: float = 1.0,
                         perfect_fraction: float = 0.25, seed: int = 0,
                         embedding_noise: float = 0.3) -> list[EditCase]:
    """Cases whose outputs are points near ``center`` and inputs sit near a category.

    A ``perfect_fraction`` of outputs land exactly on ``center`` so a radial
    scorer gives them the top score.
    """
    rng = np.random.default_rng(seed)
    cats = profile.embeddings / np.linalg.norm(profile.embeddings, axis=1, keepdims=True)
    cases = []
    for i in range(n):
        task = TASK_ORDER[rng.integers(len(TASK_ORDER))]
        k = int(rng.integers(len(profile.names)))
        emb = cats[k] + embedding_noise * rng.standard_normal(cats.shape[1]) / np.sqrt(cats.shape[1])
        if rng.random() < perfect_fraction:
            point = np.asarray(center, dtype=float)
        else:
            point = np.asarray(center, dtype=float) + spread * rng.standard_normal(len(center))
        cases.append(EditCase(
            id=f"case-{i:05d}",
            task=task,
            instruction=f"synthetic {task.value} edit #{i}",
            category_hint=profile.names[k],
            input_embedding=tuple(float(v) for v in emb),
            input_ref=f"synthetic://input/{i:05d}",
            output_ref=f"synthetic://output/{i:05d}",
            terminal_point=tuple(float(v) for v in point),
        ))
    return cases


def main(argv=None):
    import argparse
    from pathlib import Path

    from .datapipe import synthetic_coco_profile, write_jsonl

    p = argparse.ArgumentParser(prog="python3 -m prefedit.toy",
                                description="Write a synthetic raw dataset and a per-task bench suite.")
    p.add_argument("--raw", type=Path, help="raw JSONL path")
    p.add_argument("--suite", type=Path, help="suite directory (one <task>.jsonl per task)")
    p.add_argument("-n", type=int, default=1000, help="raw cases")
    p.add_argument("--per-task", type=int, default=25, help="suite cases per task")
    p.add_argument("--dim", type=int, default=16, help="input embedding size")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    profile = synthetic_coco_profile(args.dim, args.seed)
    if args.raw:
        args.raw.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl([(c, None) for c in make_synthetic_cases(args.n, profile, seed=args.seed)], args.raw)
        print(f"wrote {args.n} cases to {args.raw}")
    if args.suite:
        args.suite.mkdir(parents=True, exist_ok=True)
        pool = make_synthetic_cases(args.per_task * len(TASK_ORDER) * 4, profile, seed=args.seed + 1)
        for task in TASK_ORDER:
            picked = [c for c in pool if c.task == task][: args.per_task]
            write_jsonl([(c, None) for c in picked], args.suite / f"{task.value}.jsonl")
        print(f"wrote suite to {args.suite}")


if __name__ == "__main__":
    main()
