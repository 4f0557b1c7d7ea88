"""Per-task benchmark scoring, aggregation, correlation and report files."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cases import EditCase, EditTask, TASK_COLUMNS, TASK_LABELS, TASK_ORDER
from .datapipe import ingest, round_half_up
from .rewards import Scorer, ScoringPrompt, score_many
from .sampling import ode_sample

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["model", *[TASK_COLUMNS[t] for t in TASK_ORDER], "overall", "failures"]
CONSISTENCY_TOL = 1e-9


class SuiteError(ValueError):
    pass


@dataclass
class BenchSuite:
    cases: dict[EditTask, list[EditCase]]

    def __post_init__(self):
        ids = [c.id for cs in self.cases.values() for c in cs]
        if len(ids) != len(set(ids)):
            raise SuiteError("case ids must be unique across the suite")
        for task, cs in self.cases.items():
            if not cs:
                raise SuiteError(f"task {task.value} has no cases")
            if any(c.task != task for c in cs):
                raise SuiteError(f"case filed under {task.value} belongs to another task")

    @classmethod
    def from_cases(cls, cases: Sequence[EditCase]) -> "BenchSuite":
        grouped: dict[EditTask, list[EditCase]] = {}
        for c in cases:
            grouped.setdefault(c.task, []).append(c)
        return cls({t: grouped[t] for t in TASK_ORDER if t in grouped})

    @property
    def counts(self) -> dict[EditTask, int]:
        return {t: len(cs) for t, cs in self.cases.items()}

    def __len__(self):
        return sum(self.counts.values())


def load_suite(path, require_all: bool = True) -> BenchSuite:
    """Load a suite from one JSONL file or a directory of ``<task>.jsonl`` files."""
    path = Path(path)
    if path.is_dir():
        cases = []
        missing = []
        for task in TASK_ORDER:
            f = path / f"{task.value}.jsonl"
            if f.exists():
                cases.extend(ingest(f).cases)
            else:
                missing.append(f.name)
        if missing and require_all:
            raise SuiteError(f"suite {path} is missing task file(s): {', '.join(missing)}")
        suite = BenchSuite.from_cases(cases)
    else:
        suite = BenchSuite.from_cases(ingest(path).cases)
    if not len(suite):
        raise SuiteError(f"suite {path} is empty")
    return suite


def aggregate_overall(per_task_means: Sequence[float]) -> float:
    """Unweighted mean of the eight per-task means."""
    vals = [float(v) for v in per_task_means]
    if len(vals) != len(TASK_ORDER):
        raise ValueError(f"expected {len(TASK_ORDER)} per-task means, got {len(vals)}")
    return math.fsum(vals) / len(vals)


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if x.size < 2:
        raise ValueError("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class BenchReport:
    model: str
    per_task: dict[EditTask, float]
    counts: dict[EditTask, int] = field(default_factory=dict)
    failures: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def overall(self) -> float:
        vals = [self.per_task[t] for t in TASK_ORDER if t in self.per_task]
        if len(vals) == len(TASK_ORDER):
            return aggregate_overall(vals)
        return math.fsum(vals) / len(vals) if vals else math.nan

    def row(self) -> dict:
        out = {"model": self.model}
        for t in TASK_ORDER:
            out[TASK_COLUMNS[t]] = f"{round_half_up(self.per_task[t], 3):.3f}" if t in self.per_task else ""
        out["overall"] = f"{round_half_up(self.overall, 3):.3f}"
        out["failures"] = str(self.failures)
        return out


def case_seed(seed: int, case_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(case_id.encode())])


Sampler = Callable[[Sequence[EditCase], Sequence[np.random.SeedSequence]], np.ndarray]


def policy_sampler(field, steps: int = 40) -> Sampler:
    """Deterministic generator: x0 from each case's seed, then the ODE sampler."""

    def sample(cases, seeds):
        x0 = np.stack([np.random.default_rng(s).standard_normal(field.dim) for s in seeds])
        cond = None
        if field.cond_dim:
            cond = np.stack([np.asarray(c.condition, dtype=float) for c in cases])
        return ode_sample(field, x0, cond, steps).terminal

    return sample


def evaluate(sampler: Sampler, suite: BenchSuite, scorer: Scorer,
             prompts: Mapping[EditTask, ScoringPrompt] | None = None, seed: int = 0,
             model_id: str = "model", max_workers: int = 1) -> BenchReport:
    """Generate one output per case, score it, and average per task.

    Failed cases are left out of the means and counted in ``failures``.
    """
    if not len(suite):
        raise SuiteError("suite is empty")
    cases = [c for t in TASK_ORDER for c in suite.cases.get(t, [])]
    points = sampler(cases, [case_seed(seed, c.id) for c in cases])
    generated = [replace(c, terminal_point=tuple(float(v) for v in p)) for c, p in zip(cases, points)]
    task_prompts = None if prompts is None else [prompts[c.task] for c in generated]
    scores, failures = score_many(scorer, generated, task_prompts, max_workers=max_workers)
    per_task: dict[EditTask, list[float]] = {}
    for c, s in zip(generated, scores):
        if s is not None:
            per_task.setdefault(c.task, []).append(float(s))
    for i, err in failures:
        logger.warning("case %s failed: %s", generated[i].id, err)
    means = {t: math.fsum(v) / len(v) for t, v in per_task.items()}
    return BenchReport(
        model_id,
        {t: means[t] for t in TASK_ORDER if t in means},
        {t: len(per_task.get(t, [])) for t in suite.cases},
        len(failures),
        {"model": model_id, "scorer": getattr(scorer, "name", type(scorer).__name__), "seed": seed},
    )


def check_consistency(report: BenchReport):
    vals = [report.per_task[t] for t in TASK_ORDER if t in report.per_task]
    if not vals:
        raise ValueError(f"report {report.model} has no per-task means")
    if abs(report.overall - math.fsum(vals) / len(vals)) > CONSISTENCY_TOL:
        raise ValueError(f"report {report.model}: overall is not the mean of its task means")


def read_report_csv(path) -> list[BenchReport]:
    reports = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            per_task = {t: float(row[TASK_COLUMNS[t]]) for t in TASK_ORDER if row.get(TASK_COLUMNS[t])}
            rep = BenchReport(row["model"], per_task, failures=int(row.get("failures") or 0))
            if abs(rep.overall - float(row["overall"])) > 0.0005 + CONSISTENCY_TOL:
                raise ValueError(f"{path}: overall for {rep.model} does not match its task means")
            reports.append(rep)
    return reports


def _markdown(rows: list[dict]) -> str:
    headers = ["Model", *[TASK_LABELS[t] for t in TASK_ORDER], "Overall"]
    keys = ["model", *[TASK_COLUMNS[t] for t in TASK_ORDER], "overall"]
    table = [headers] + [[r[k] for k in keys] for r in rows]
    widths = [max(len(line[j]) for line in table) for j in range(len(headers))]

    def fmt(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    lines = [fmt(headers), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(r) for r in table[1:]]
    return "\n".join(lines) + "\n"


def emit_report(reports: BenchReport | Sequence[BenchReport], out_dir, stem: str = "report",
                formats: Sequence[str] = ("csv", "md")) -> list[Path]:
    """Write one row per model, sorted by overall score (highest first)."""
    if isinstance(reports, BenchReport):
        reports = [reports]
    for r in reports:
        check_consistency(r)
    ordered = sorted(reports, key=lambda r: (-round_half_up(r.overall, 3), r.model))
    rows = [r.row() for r in ordered]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            p = out_dir / f"{stem}.csv"
            with p.open("w", newline="") as fh:
                w = csv.DictWriter(fh, CSV_COLUMNS, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        elif fmt == "md":
            p = out_dir / f"{stem}.md"
            p.write_text(_markdown(rows))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    return written
