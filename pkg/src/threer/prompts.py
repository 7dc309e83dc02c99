"""Iterative modifier merging and N-variant prompt refinement."""

from __future__ import annotations

import ast
import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

from threer.clients.base import ChatClient, ChatRequest
from threer.errors import (
    ClientError,
    DescriptionCollapse,
    RefinementFailure,
    UnparseableCandidates,
    ValidationError,
)
from threer.hashing import sha256_hex
from threer.retrieval import Modifier

logger = logging.getLogger(__name__)

MERGE_TEMPLATE = "merge_v1.txt"
REFINE_TEMPLATES = ("refine_v1.system.txt", "refine_v1.examples.txt", "refine_v1.user.txt")
USER_SPLIT = "---USER---\n"
TEMPLATE_TOKENS = ("{user_prompt}", "{description}", "{examples}", "{modifier}")

MERGE_TEMPERATURE = 0.2
REFINE_TEMPERATURE = 0.8
WORD_LIMIT = 100


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("threer.templates").joinpath(name).read_text(encoding="utf-8")


def template_hashes() -> dict[str, str]:
    """Hash of every template the pipeline renders, for run records and cache keys."""
    names = (MERGE_TEMPLATE, *REFINE_TEMPLATES, "critique_v1.txt")
    return {name: sha256_hex(load_template(name)) for name in names}


def render_merge_prompt(intent: str, description: str, modifier: Modifier | str) -> tuple[str, str]:
    text = modifier.text if isinstance(modifier, Modifier) else modifier
    system, user = load_template(MERGE_TEMPLATE).split(USER_SPLIT, 1)
    return system, user.format(user_prompt=intent, description=description, modifier=text)


# phrases in the refinement template that carry the candidate count
_COUNT_PHRASES = (
    (r"Produce ", r" clean"),
    (r"among the ", r" descriptions"),
    (r"Return only the ", r" \*\*refined"),
    (r"a single list of ", r" strings"),
    (r"\n", r" Refined Descriptions:"),
)


def _set_count(text: str, n: int) -> str:
    for before, after in _COUNT_PHRASES:
        text = re.sub(f"({before})4({after})", rf"\g<1>{n}\g<2>", text)
    return text


def render_refinement_prompt(intent: str, description: str, n: int = 4) -> tuple[str, str]:
    if not intent.strip() or not description.strip():
        raise ValidationError("intent and description must be non-empty")
    system_tpl, examples, user_tpl = (load_template(name) for name in REFINE_TEMPLATES)
    user = user_tpl.format(examples=examples, user_prompt=intent, description=description)
    if n != 4:
        system_tpl, user = _set_count(system_tpl, n), _set_count(user, n)
    return system_tpl, user


@dataclass
class MergeState:
    intent: str
    current_description: str
    remaining: deque[Modifier]
    applied: list[tuple[Modifier, str]] = field(default_factory=list)

    @classmethod
    def start(cls, intent: str, queue: Sequence[Modifier]) -> MergeState:
        return cls(intent, intent, deque(queue))

    def to_dict(self) -> dict:
        return {
            "intent": self.intent,
            "merged": self.current_description,
            "steps": [{"modifier": m.to_dict(), "description": d} for m, d in self.applied],
        }


def _clean_description(raw: str) -> str:
    text = raw.strip()
    text = re.sub(r"^(merged description|description)\s*:\s*", "", text, flags=re.IGNORECASE)
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def run_merge(
    intent: str,
    queue: Sequence[Modifier],
    llm: ChatClient,
    *,
    temperature: float = MERGE_TEMPERATURE,
    seed: int | None = None,
) -> MergeState:
    """Fold modifiers into the description one chat call at a time, starting from the bare intent."""
    if not intent.strip():
        raise ValidationError("intent must be non-empty")
    state = MergeState.start(intent, queue)
    step = 0
    while state.remaining:
        modifier = state.remaining[0]
        system, user = render_merge_prompt(intent, state.current_description, modifier)
        try:
            raw = llm.complete(ChatRequest(system, user, temperature=temperature, seed=seed))
        except ClientError as exc:
            exc.merge_step = step
            raise
        description = _clean_description(raw)
        if not description:
            raise DescriptionCollapse(step)
        state.remaining.popleft()
        state.applied.append((modifier, description))
        state.current_description = description
        step += 1
    return state


def merge_modifiers(intent: str, queue: Sequence[Modifier], llm: ChatClient, **kwargs) -> str:
    return run_merge(intent, queue, llm, **kwargs).current_description


_FENCE = re.compile(r"```[a-zA-Z]*\s*(.*?)```", re.DOTALL)
_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")
_HEADER = re.compile(r"^\s*(?:\d+\s+)?refined descriptions?\s*:?\s*$", re.IGNORECASE)


def _as_string_list(text: str) -> list[str] | None:
    text = text.strip()
    if not text.startswith("["):
        return None
    for loader in (json.loads, ast.literal_eval):
        try:
            value = loader(text)
        except (ValueError, SyntaxError, json.JSONDecodeError):
            continue
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return [v.strip() for v in value if v.strip()]
    return None


def _from_blocks(text: str) -> list[str]:
    text = _FENCE.sub(lambda m: m.group(1), text)
    blocks = [b for b in re.split(r"\n\s*\n", text.strip()) if b.strip()]
    if len(blocks) == 1:
        blocks = [line for line in blocks[0].splitlines() if line.strip()]
    out = []
    for block in blocks:
        lines = [line.strip() for line in block.splitlines() if line.strip() and not _HEADER.match(line)]
        if not lines:
            continue
        item = " ".join(lines)
        item = _NUMBERING.sub("", item).strip().rstrip(",").strip()
        if len(item) >= 2 and item[0] == item[-1] and item[0] in "\"'":
            item = item[1:-1].strip()
        if item and item not in "[]":
            out.append(item)
    return out


def parse_candidate_list(raw: str, n: int) -> list[str]:
    """Extract up to ``n`` prompt strings from a model completion.

    Tries a bare JSON (or Python) list, then a fenced list, then
    blank-line or line-delimited blocks with numbering stripped.
    """
    strategies = [
        lambda: _as_string_list(raw),
        lambda: next((found for m in _FENCE.finditer(raw) if (found := _as_string_list(m.group(1)))), None),
        lambda: _from_blocks(raw),
    ]
    for strategy in strategies:
        found = strategy()
        if found:
            if len(found) > n:
                logger.warning("parsed %d candidates, truncating to %d", len(found), n)
            return found[:n]
    raise UnparseableCandidates(raw[:200])


@dataclass(frozen=True)
class PromptCandidateSet:
    intent: str
    merged: str
    candidates: tuple[str, ...]
    padded: tuple[bool, ...]
    provenance: dict = field(default_factory=dict)
    attempts: int = 1
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.candidates) != len(self.padded):
            raise ValidationError("padded flags must align with candidates")
        if any(not c.strip() for c in self.candidates):
            raise ValidationError("empty candidate")

    @property
    def n(self) -> int:
        return len(self.candidates)

    def to_dict(self) -> dict:
        return {
            "intent": self.intent,
            "merged": self.merged,
            "candidates": list(self.candidates),
            "padded": list(self.padded),
            "provenance": self.provenance,
            "attempts": self.attempts,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PromptCandidateSet:
        return cls(
            d["intent"],
            d["merged"],
            tuple(d["candidates"]),
            tuple(d["padded"]),
            d.get("provenance", {}),
            d.get("attempts", 1),
            tuple(d.get("warnings", ())),
        )


def refine(
    intent: str,
    merged: str,
    llm: ChatClient,
    n: int = 4,
    *,
    repair_attempts: int = 2,
    temperature: float = REFINE_TEMPERATURE,
    seed: int | None = None,
    word_limit: int = WORD_LIMIT,
    provenance: dict | None = None,
) -> PromptCandidateSet:
    if n < 1:
        raise ValidationError("n must be >= 1")
    system, user = render_refinement_prompt(intent, merged, n)
    best: list[str] = []
    attempts = 0
    message = user
    for _ in range(repair_attempts + 1):
        attempts += 1
        raw = llm.complete(ChatRequest(system, message, temperature=temperature, seed=seed, max_tokens=2048))
        try:
            found = parse_candidate_list(raw, n)
        except UnparseableCandidates:
            found = []
        found = [c for c in found if not any(tok in c for tok in TEMPLATE_TOKENS)]
        if len(found) > len(best):
            best = found
        if len(best) == n:
            break
        message = (
            f"{user}\nYour previous answer contained {len(found)} usable descriptions. "
            f"Return exactly {n} refined descriptions as a single JSON list of {n} strings."
        )
    if not best:
        raise RefinementFailure(f"no parseable candidates after {attempts} attempts")
    padded = [False] * len(best) + [True] * (n - len(best))
    candidates = best + [merged] * (n - len(best))
    warnings = []
    if any(padded):
        warnings.append(f"padded {padded.count(True)} of {n} candidates with the merged description")
    for i, c in enumerate(candidates):
        words = len(c.split())
        if words > word_limit:
            warnings.append(f"candidate {i} has {words} words (limit {word_limit})")
    for w in warnings:
        logger.warning(w)
    return PromptCandidateSet(
        intent, merged, tuple(candidates), tuple(padded), dict(provenance or {}), attempts, tuple(warnings)
    )
