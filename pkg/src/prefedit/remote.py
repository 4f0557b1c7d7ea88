"""JSON-over-HTTP client for an external scoring service.

Request body (POST ``<endpoint>/score``)::

    {"task", "instruction", "input_ref", "output_ref", "rubric": [6], "questions": [...]}

Response body: ``{"score": <real in [0, 5]>}``.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass

import httpx

from .cases import EditCase, point_ref
from .rewards import (
    MalformedResponse,
    MissingOutput,
    Scorer,
    ScorerError,
    ScorerTimeout,
    ScorerUnreachable,
    ScoreOutOfRange,
    ScoringPrompt,
    prompt_registry,
)

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "HP_SCORER_ENDPOINT"
RETRYABLE_STATUS = {408, 425, 429, 500, 502, 503, 504}


@dataclass
class RemoteStats:
    requests: int = 0
    retries: int = 0
    failures: int = 0


def build_payload(case: EditCase, prompt: ScoringPrompt) -> dict:
    output_ref = case.output_ref
    if output_ref is None and case.terminal_point is not None:
        output_ref = point_ref(case.terminal_point)
    return {
        "task": case.task.value,
        "instruction": case.instruction,
        "input_ref": case.input_ref,
        "output_ref": output_ref,
        "rubric": list(prompt.rubric),
        "questions": list(prompt.questions),
    }


def parse_score(body: bytes) -> float:
    try:
        data = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedResponse(f"response is not JSON: {exc}") from None
    if not isinstance(data, dict) or "score" not in data:
        raise MalformedResponse("response lacks a 'score' field")
    s = data["score"]
    if isinstance(s, bool) or not isinstance(s, (int, float)):
        raise MalformedResponse(f"score is not a number: {s!r}")
    s = float(s)
    if not 0.0 <= s <= 5.0:
        raise ScoreOutOfRange(f"backend returned score {s} outside [0, 5]")
    return s


class RemoteScorer(Scorer):
    """Scores cases through an HTTP backend with retries and an in-flight cap.

    Timeouts, connection failures and retryable HTTP statuses are retried up
    to ``max_retries`` times with exponential backoff. Malformed bodies and
    out-of-range scores are never retried or clamped.
    """

    name = "remote"

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0, max_in_flight: int = 4,
                 max_retries: int = 3, backoff: float = 0.25, prompts=None):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ValueError(f"no scorer endpoint configured (set {ENDPOINT_ENV})")
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be positive")
        self.endpoint = endpoint.rstrip("/")
        self.url = self.endpoint if self.endpoint.endswith("/score") else self.endpoint + "/score"
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.prompts = prompts
        self.stats = RemoteStats()
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _count(self, field: str):
        with self._lock:
            setattr(self.stats, field, getattr(self.stats, field) + 1)

    def score(self, case: EditCase, prompt: ScoringPrompt | None = None) -> float:
        if not case.has_output:
            raise MissingOutput(f"case {case.id} has no output")
        if prompt is None:
            prompt = (self.prompts or prompt_registry())[case.task]
        payload = build_payload(case, prompt)
        last: ScorerError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._count("retries")
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self._count("requests")
            try:
                with self._slots:
                    resp = self._client.post(self.url, json=payload)
            except httpx.TimeoutException:
                last = ScorerTimeout(f"{self.url} timed out after {self.timeout}s")
                continue
            except httpx.TransportError as exc:
                last = ScorerUnreachable(f"cannot reach scorer at {self.url}: {exc}")
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = ScorerError(f"{self.url} returned HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                self._count("failures")
                raise ScorerError(f"{self.url} returned HTTP {resp.status_code}")
            try:
                return parse_score(resp.content)
            except ScorerError:
                self._count("failures")
                raise
        self._count("failures")
        logger.warning("scorer gave up on case %s after %d attempts", case.id, self.max_retries + 1)
        raise last


def remote_scorer(endpoint=None, timeout: float = 30.0, max_in_flight: int = 4, **kw) -> RemoteScorer:
    return RemoteScorer(endpoint, timeout, max_in_flight, **kw)
