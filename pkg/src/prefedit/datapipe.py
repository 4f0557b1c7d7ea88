"""Hard-case preference dataset construction.

ingest -> score -> drop perfect (score 5) cases -> label categories by
embedding similarity -> cap over-represented categories -> report stats.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cases import EditCase, EditTask, TASK_ORDER
from .rewards import Scorer, ScoringPrompt, score_many

logger = logging.getLogger(__name__)

PERFECT_SCORE = 5.0
SCORE_TOL = 1e-9

COCO_CATEGORIES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
)


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class RawDataset:
    cases: list[EditCase]
    notes: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.cases)


@dataclass
class ScoredDataset:
    entries: list[tuple[EditCase, float]]
    failures: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]


@dataclass
class HardCaseDataset(ScoredDataset):
    warnings: list[str] = field(default_factory=list)


def ingest(path: str | Path) -> RawDataset:
    """Read one case per JSONL line; blank lines are skipped."""
    path = Path(path)
    cases: list[EditCase] = []
    seen: dict[str, int] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            try:
                case = EditCase.from_record(rec)
            except (ValueError, TypeError) as exc:
                raise DatasetError(str(exc), lineno) from None
            if case.id in seen:
                raise DatasetError(f"duplicate id {case.id!r} (first seen on line {seen[case.id]})", lineno)
            seen[case.id] = lineno
            cases.append(case)
    return RawDataset(cases, [f"ingested {len(cases)} cases from {path.name}"])


def score_dataset(raw: RawDataset | Sequence[EditCase], scorer: Scorer,
                  prompts: Mapping[EditTask, ScoringPrompt] | None = None,
                  max_workers: int = 1) -> ScoredDataset:
    """Score every case with its task's prompt; per-case failures are collected."""
    cases = list(raw.cases if isinstance(raw, RawDataset) else raw)
    task_prompts = None if prompts is None else [prompts[c.task] for c in cases]
    scores, failures = score_many(scorer, cases, task_prompts, max_workers=max_workers)
    failed = dict(failures)
    entries = [(c, float(s)) for i, (c, s) in enumerate(zip(cases, scores)) if i not in failed]
    out = ScoredDataset(entries, [(cases[i].id, str(e)) for i, e in failures])
    if failures:
        logger.warning("%d of %d cases failed to score", len(failures), len(cases))
    return out


def filter_hard_cases(scored: ScoredDataset, threshold: float | None = None) -> HardCaseDataset:
    """Keep entries that are not perfect.

    By default a case is perfect when its score equals 5 (within 1e-9);
    with ``threshold`` set, any score >= threshold is dropped instead.
    """
    if threshold is None:
        keep = [(c, s) for c, s in scored.entries if abs(s - PERFECT_SCORE) > SCORE_TOL]
    else:
        keep = [(c, s) for c, s in scored.entries if s < threshold]
    warnings = []
    if scored.entries and not keep:
        warnings.append(f"all {len(scored.entries)} scored cases were perfect; hard-case set is empty")
        logger.warning(warnings[-1])
    return HardCaseDataset(keep, list(scored.failures), warnings)


@dataclass
class CategoryProfile:
    names: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if not self.names:
            raise ValueError("category profile is empty")
        if self.embeddings.shape[0] != len(self.names):
            raise ValueError("one embedding per category required")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(norms == 0):
            raise ValueError("category embeddings must be nonzero")

    @classmethod
    def load(cls, path: str | Path) -> "CategoryProfile":
        data = json.loads(Path(path).read_text())
        return cls(tuple(data["names"]), np.asarray(data["embeddings"], dtype=float))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "embeddings": self.embeddings.tolist()}

    def similarities(self, embeddings) -> np.ndarray:
        e = np.atleast_2d(np.asarray(embeddings, dtype=float))
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm case embedding")
        cats = self.embeddings / np.linalg.norm(self.embeddings, axis=1, keepdims=True)
        return (e / norms[:, None]) @ cats.T


def synthetic_coco_profile(dim: int = 16, seed: int = 0) -> CategoryProfile:
    """MS-COCO label names with seeded random unit embeddings of size ``dim``."""
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((len(COCO_CATEGORIES), dim))
    return CategoryProfile(COCO_CATEGORIES, emb / np.linalg.norm(emb, axis=1, keepdims=True))


def assign_categories(cases: Sequence[EditCase], profile: CategoryProfile) -> list[EditCase]:
    """Label each case with its most cosine-similar category; ties go to the smaller name."""
    if not cases:
        return []
    for c in cases:
        if not c.input_embedding:
            raise ValueError(f"case {c.id} has no input embedding")
    sims = profile.similarities([c.input_embedding for c in cases])
    order = sorted(range(len(profile.names)), key=lambda j: profile.names[j])
    sims = sims[:, order]
    names = [profile.names[j] for j in order]
    # argmax returns the first maximum, i.e. the lexicographically smallest name
    best = np.argmax(sims, axis=1)
    return [replace(c, category=names[b]) for c, b in zip(cases, best)]


def balance_cap(n_cases: int, n_categories: int, cap_ratio: float) -> float:
    if n_categories == 0:
        return 0
    return cap_ratio * math.ceil(n_cases / n_categories)


def balance_categories(entries: Sequence[tuple[EditCase, float]], cap_ratio: float
                       ) -> list[tuple[EditCase, float]]:
    """Trim each category to ``cap_ratio * ceil(N / #categories)`` cases.

    Within an over-full category the lowest-scoring cases are kept (ties by
    id); the surviving entries stay in input order.
    """
    if not cap_ratio >= 1:
        raise ValueError("cap_ratio must be >= 1")
    if math.isinf(cap_ratio):
        return list(entries)
    by_cat: dict[str, list[int]] = {}
    for i, (case, _) in enumerate(entries):
        if case.category is None:
            raise ValueError(f"case {case.id} has no category label")
        by_cat.setdefault(case.category, []).append(i)
    cap = math.floor(balance_cap(len(entries), len(by_cat), cap_ratio))
    keep: set[int] = set()
    for idx in by_cat.values():
        ranked = sorted(idx, key=lambda i: (entries[i][1], entries[i][0].id))
        keep.update(ranked[:cap])
    return [e for i, e in enumerate(entries) if i in keep]


def round_half_up(x: float, places: int) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class DatasetStats:
    counts: dict[str, int]
    total: int

    @property
    def ratios(self) -> dict[str, float]:
        if self.total == 0:
            return {}
        return {k: round_half_up(100.0 * v / self.total, 2) for k, v in self.counts.items()}

    def rows(self) -> list[tuple[str, int, float]]:
        r = self.ratios
        return [(k, v, r[k]) for k, v in self.counts.items()] if self.total else []

    def write_csv(self, path: str | Path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "count", "ratio"])
            for task, count, ratio in self.rows():
                w.writerow([task, count, f"{ratio:.2f}"])
            w.writerow(["total", self.total, "100.00" if self.total else ""])


def stats_from_counts(counts: Mapping[str, int]) -> DatasetStats:
    counts = {str(k): int(v) for k, v in counts.items()}
    return DatasetStats(counts, sum(counts.values()))


def dataset_stats(dataset) -> DatasetStats:
    """Per-task counts and percentages for any dataset or list of cases."""
    if isinstance(dataset, RawDataset):
        cases = dataset.cases
    elif isinstance(dataset, ScoredDataset):
        cases = [c for c, _ in dataset.entries]
    else:
        cases = [c[0] if isinstance(c, tuple) else c for c in dataset]
    counts = {t.value: 0 for t in TASK_ORDER}
    for c in cases:
        counts[c.task.value] += 1
    return stats_from_counts({k: v for k, v in counts.items() if v})


def write_jsonl(entries: Iterable[tuple[EditCase, float | None]], path: str | Path):
    with Path(path).open("w") as fh:
        for case, score in entries:
            fh.write(json.dumps(case.to_record(score), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


@dataclass
class PipelineResult:
    raw: int
    scored: ScoredDataset
    hard: HardCaseDataset
    final: list[tuple[EditCase, float]]
    stats: DatasetStats

    @property
    def discarded(self) -> int:
        return len(self.scored) - len(self.hard)


def build_hard_case_dataset(raw: RawDataset, scorer: Scorer, prompts=None,
                            profile: CategoryProfile | None = None, cap_ratio: float | None = None,
                            threshold: float | None = None, order: str = "filter_first",
                            max_workers: int = 1) -> PipelineResult:
    """Run the whole pipeline. ``order`` is ``filter_first`` or ``balance_first``."""
    if order not in ("filter_first", "balance_first"):
        raise ValueError(f"unknown pipeline order {order!r}")
    scored = score_dataset(raw, scorer, prompts, max_workers=max_workers)

    def balance(entries):
        if profile is None:
            return list(entries)
        labeled = assign_categories([c for c, _ in entries], profile)
        labeled = list(zip(labeled, [s for _, s in entries]))
        return labeled if cap_ratio is None else balance_categories(labeled, cap_ratio)

    if order == "filter_first":
        hard = filter_hard_cases(scored, threshold)
        final = balance(hard.entries)
    else:
        balanced = ScoredDataset(balance(scored.entries), scored.failures)
        hard = filter_hard_cases(balanced, threshold)
        final = hard.entries
    return PipelineResult(len(raw), scored, hard, final, dataset_stats(final))
