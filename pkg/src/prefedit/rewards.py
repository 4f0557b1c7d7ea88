"""0-5 rubric scoring: prompts, sigmoid reward normalization and scorer backends."""

from __future__ import annotations

import json
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .cases import EditCase, EditTask

SCORE_MIN = 0.0
SCORE_MAX = 5.0
DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 5.0


class ScorerError(RuntimeError):
    """Base class for failures to obtain a score for one case."""


class MissingOutput(ScorerError):
    pass


class ScorerTimeout(ScorerError):
    pass


class ScorerUnreachable(ScorerError):
    """The backend could not be contacted at all; not a per-case failure."""


class MalformedResponse(ScorerError):
    pass


class ScoreOutOfRange(ScorerError):
    pass


def check_score(s) -> float:
    s = float(s)
    if not (SCORE_MIN <= s <= SCORE_MAX):
        raise ScoreOutOfRange(f"score {s} outside [0, 5]")
    return s


def normalize_reward(s, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA):
    """Map a 0-5 score to (0, 1) with 1 / (1 + exp(-alpha * s + beta))."""
    arr = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any((arr < SCORE_MIN) | (arr > SCORE_MAX)):
        raise ScoreOutOfRange("scores must lie in [0, 5]")
    r = 1.0 / (1.0 + np.exp(-alpha * arr + beta))
    return float(r) if r.ndim == 0 else r


# -- prompts -----------------------------------------------------------------

@dataclass(frozen=True)
class ScoringPrompt:
    task: EditTask
    rubric: tuple[str, ...]
    questions: tuple[str, ...]

    def __post_init__(self):
        if len(self.rubric) != 6:
            raise ValueError("rubric needs one description per score 0..5")
        if not self.questions:
            raise ValueError(f"prompt for {self.task.value} has no questions")

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringPrompt":
        return cls(EditTask.parse(d["task"]), tuple(d["rubric"]), tuple(d["questions"]))

    def to_dict(self) -> dict:
        return {"task": self.task.value, "rubric": list(self.rubric), "questions": list(self.questions)}

    def render(self) -> str:
        lines = [
            "You rate an image edit given input image A, edited image B and the instruction.",
            "Answer with a single score from 0 to 5 using these criteria:",
            *self.rubric,
            "Before scoring, consider:",
            *(f"- {q}" for q in self.questions),
        ]
        return "\n".join(lines)


def load_prompts(directory: str | Path | None = None) -> dict[EditTask, ScoringPrompt]:
    if directory is None:
        root = resources.files("prefedit") / "prompts"
        files = [p for p in root.iterdir() if p.name.endswith(".json")]
    else:
        files = sorted(Path(directory).glob("*.json"))
    out = {}
    for p in sorted(files, key=lambda p: p.name):
        prompt = ScoringPrompt.from_dict(json.loads(p.read_text()))
        out[prompt.task] = prompt
    missing = [t.value for t in EditTask if t not in out]
    if missing:
        where = "bundled prompts" if directory is None else f"prompts in {directory}"
        raise ValueError(f"{where} missing for: {', '.join(missing)}")
    return out


def prompt_registry() -> dict[EditTask, ScoringPrompt]:
    return load_prompts()


def default_rubric() -> tuple[str, ...]:
    return prompt_registry()[EditTask.ADDITION].rubric


# -- scorers -----------------------------------------------------------------

class Scorer:
    """Assigns a 0-5 score to an edit case; subclasses implement ``score``."""

    name = "scorer"

    def score(self, case: EditCase, prompt: ScoringPrompt | None = None) -> float:
        raise NotImplementedError


def score_many(scorer: Scorer, cases: Sequence[EditCase],
               prompts: Sequence[ScoringPrompt | None] | None = None,
               pool: Executor | None = None, max_workers: int = 1):
    """Score ``cases`` and collect per-case failures.

    Returns ``(scores, failures)``: ``scores[i]`` is None where case i failed
    and ``failures`` lists ``(i, error)``. :class:`ScorerUnreachable`
    propagates since it is not specific to a case.
    """
    if prompts is None:
        prompts = [None] * len(cases)
    batch = getattr(scorer, "score_batch", None)
    if batch is not None:
        return batch(cases, prompts)

    def one(i):
        try:
            return scorer.score(cases[i], prompts[i]), None
        except ScorerUnreachable:
            raise
        except ScorerError as exc:
            return None, exc

    if pool is None and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as own:
            results = list(own.map(one, range(len(cases))))
    elif pool is not None:
        results = list(pool.map(one, range(len(cases))))
    else:
        results = [one(i) for i in range(len(cases))]
    scores = [s for s, _ in results]
    failures = [(i, e) for i, (_, e) in enumerate(results) if e is not None]
    return scores, failures


@dataclass(frozen=True)
class ModePreferenceScorer(Scorer):
    """Piecewise-linear radial score around a preferred point.

    5 inside ``r5``, falling to 3 at ``r3`` and to 0 at ``2 * r3``.
    """

    center: tuple[float, ...]
    r5: float
    r3: float
    name = "mode_preference"

    def __post_init__(self):
        if not 0 < self.r5 < self.r3:
            raise ValueError("need 0 < r5 < r3")

    def score_distance(self, d):
        d = np.asarray(d, dtype=float)
        r5, r3 = self.r5, self.r3
        inner = 5.0 - 2.0 * (d - r5) / (r3 - r5)
        outer = 3.0 - 3.0 * (d - r3) / r3
        s = np.where(d <= r5, 5.0, np.where(d <= r3, inner, np.where(d <= 2 * r3, outer, 0.0)))
        return float(s) if s.ndim == 0 else s

    def score_points(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return self.score_distance(np.linalg.norm(p - np.asarray(self.center), axis=1))

    def score(self, case: EditCase, prompt: ScoringPrompt | None = None) -> float:
        if case.terminal_point is None:
            raise MissingOutput(f"case {case.id} has no output point")
        return float(self.score_points(case.terminal_point)[0])

    def score_batch(self, cases, prompts=None):
        missing = [i for i, c in enumerate(cases) if c.terminal_point is None]
        ok = [i for i, c in enumerate(cases) if c.terminal_point is not None]
        scores: list[float | None] = [None] * len(cases)
        if ok:
            vals = self.score_points([cases[i].terminal_point for i in ok])
            for i, v in zip(ok, np.atleast_1d(vals)):
                scores[i] = float(v)
        return scores, [(i, MissingOutput(f"case {cases[i].id} has no output point")) for i in missing]


def mode_preference_scorer(center, radii) -> ModePreferenceScorer:
    r5, r3 = radii
    return ModePreferenceScorer(tuple(float(c) for c in center), float(r5), float(r3))


@dataclass(frozen=True)
class ConstantScorer(Scorer):
    value: float
    name = "constant"

    def score(self, case, prompt=None) -> float:
        if not case.has_output:
            raise MissingOutput(f"case {case.id} has no output")
        return check_score(self.value)
