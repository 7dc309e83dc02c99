"""Weighted VQA scoring of candidate videos and best-of-N selection."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass
from importlib import resources
from typing import IO, MutableMapping, Sequence

from threer.clients.base import PLACEHOLDER, VideoArtifact, VqaAnswer, VqaClient
from threer.errors import MixedBanks, NonFiniteWeight, ValidationError, WrongEntryCount
from threer.hashing import canonical_json, sha256_hex

BANK_SIZE = 29


@dataclass(frozen=True)
class QuestionEntry:
    question: str
    weight: float

    @property
    def prompt_dependent(self) -> bool:
        return PLACEHOLDER in self.question


@dataclass(frozen=True)
class QuestionBank:
    entries: tuple[QuestionEntry, ...]
    bank_id: str

    def __post_init__(self) -> None:
        if len(self.entries) != BANK_SIZE:
            raise WrongEntryCount(len(self.entries), BANK_SIZE)
        for i, e in enumerate(self.entries):
            if not math.isfinite(e.weight):
                raise NonFiniteWeight(i)

    @property
    def weights(self) -> list[float]:
        return [e.weight for e in self.entries]

    def scaled(self, factor: float) -> QuestionBank:
        entries = tuple(QuestionEntry(e.question, e.weight * factor) for e in self.entries)
        return QuestionBank(entries, _bank_hash(entries))

    def to_list(self) -> list[dict]:
        return [{"question": e.question, "weight": e.weight} for e in self.entries]


def _bank_hash(entries: Sequence[QuestionEntry]) -> str:
    return sha256_hex(canonical_json([{"question": e.question, "weight": e.weight} for e in entries]))


def load_question_bank(source: IO[bytes] | IO[str] | bytes | str) -> QuestionBank:
    """Read a JSON array of ``{"question", "weight"}`` objects.

    ``bank_id`` hashes the canonicalized content, so formatting differences
    in the file do not change it.
    """
    data = source if isinstance(source, (bytes, str)) else source.read()
    try:
        raw = json.loads(data, parse_constant=lambda c: float(c))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"question bank is not valid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise ValidationError("question bank must be a JSON array")
    if len(raw) != BANK_SIZE:
        raise WrongEntryCount(len(raw), BANK_SIZE)
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or set(item) != {"question", "weight"}:
            raise ValidationError(f"bank entry {i} must have exactly 'question' and 'weight'")
        question, weight = item["question"], item["weight"]
        if not isinstance(question, str) or not question.strip():
            raise ValidationError(f"bank entry {i} has an empty question")
        if isinstance(weight, bool) or not isinstance(weight, (int, float)):
            raise ValidationError(f"bank entry {i} weight is not a number")
        if not math.isfinite(weight):
            raise NonFiniteWeight(i)
        entries.append(QuestionEntry(question, float(weight)))
    return QuestionBank(tuple(entries), _bank_hash(entries))


def default_bank() -> QuestionBank:
    return load_question_bank(resources.files("threer.data").joinpath("default_bank.json").read_bytes())


def instantiate_question(template: str, prompt: str) -> str:
    if not prompt.strip():
        raise ValidationError("prompt must be non-empty")
    return template.replace(PLACEHOLDER, prompt)


@dataclass(frozen=True)
class ScoreReport:
    candidate_index: int
    answers: tuple[VqaAnswer, ...]
    weighted_total: float
    bank_id: str
    video_id: str = ""
    latencies: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "candidate_index": self.candidate_index,
            "video_id": self.video_id,
            "bank_id": self.bank_id,
            "weighted_total": self.weighted_total,
            "answers": [{"question_id": a.question_id, "score": a.score} for a in self.answers],
            "latencies": list(self.latencies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScoreReport:
        return cls(
            int(d["candidate_index"]),
            tuple(VqaAnswer(int(a["question_id"]), float(a["score"])) for a in d["answers"]),
            float(d["weighted_total"]),
            d["bank_id"],
            d.get("video_id", ""),
            tuple(d.get("latencies", ())),
        )


def weighted_sum(weights: Sequence[float], scores: Sequence[float]) -> float:
    # fixed left-to-right fold in question order
    total = 0.0
    for w, s in zip(weights, scores):
        total += w * s
    return total


class VqaCache:
    """Answers keyed by (VQA backend id, video id, instantiated question hash)."""

    def __init__(self, backing: MutableMapping[str, float] | None = None):
        self._data = backing if backing is not None else {}
        self._lock = threading.Lock()
        self.hits = 0

    @staticmethod
    def key(backend_id: str, video_id: str, question: str) -> str:
        return f"{sha256_hex(backend_id)[:16]}:{video_id}:{sha256_hex(question)}"

    def get(self, backend_id: str, video_id: str, question: str) -> float | None:
        with self._lock:
            value = self._data.get(self.key(backend_id, video_id, question))
            if value is not None:
                self.hits += 1
            return value

    def put(self, backend_id: str, video_id: str, question: str, score: float) -> None:
        with self._lock:
            self._data[self.key(backend_id, video_id, question)] = score


def score_video(
    video: VideoArtifact,
    prompt: str,
    bank: QuestionBank,
    vqa: VqaClient,
    *,
    candidate_index: int = 0,
    cache: VqaCache | None = None,
) -> ScoreReport:
    """Ask every bank question about ``video`` and sum weight times answer.

    Any client error aborts the whole report; unanswered questions are never
    imputed.
    """
    answers = []
    latencies = []
    for qid, entry in enumerate(bank.entries):
        question = instantiate_question(entry.question, prompt)
        started = time.perf_counter()
        cached = cache.get(vqa.backend_id, video.id, question) if cache is not None else None
        if cached is not None:
            answer = VqaAnswer(qid, cached)
        else:
            answer = vqa.answer_question(video, question, qid)
            if cache is not None:
                cache.put(vqa.backend_id, video.id, question, answer.score)
        latencies.append(time.perf_counter() - started)
        answers.append(answer)
    total = weighted_sum(bank.weights, [a.score for a in answers])
    return ScoreReport(candidate_index, tuple(answers), total, bank.bank_id, video.id, tuple(latencies))


@dataclass(frozen=True)
class SelectionResult:
    winner_index: int
    reports: tuple[ScoreReport, ...]
    tie_broken: bool

    @property
    def winner(self) -> ScoreReport:
        return next(r for r in self.reports if r.candidate_index == self.winner_index)

    def to_dict(self) -> dict:
        return {
            "winner_index": self.winner_index,
            "tie_broken": self.tie_broken,
            "totals": {str(r.candidate_index): r.weighted_total for r in self.reports},
        }


def select_best(reports: Sequence[ScoreReport]) -> SelectionResult:
    if not reports:
        raise ValidationError("select_best needs at least one report")
    banks = {r.bank_id for r in reports}
    if len(banks) > 1:
        raise MixedBanks(banks)
    best = max(r.weighted_total for r in reports)
    tied = sorted(r.candidate_index for r in reports if r.weighted_total == best)
    return SelectionResult(tied[0], tuple(reports), len(tied) > 1)
