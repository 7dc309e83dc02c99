"""Relation database loading and thresholded similarity retrieval.

Scenes whose embedding has cosine similarity strictly above ``tau`` with the
intent embedding are kept, best first, and each contributes its first
``top_k`` modifiers per category.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Protocol

import numpy as np

from threer.errors import DimensionMismatch, EmptyDatabase, MalformedRecord, ValidationError
from threer.hashing import hash_obj

logger = logging.getLogger(__name__)

CATEGORIES = ("subject", "action", "environment")
_FILE_KEYS = {"subject": "subjects", "action": "actions", "environment": "environments"}
_ALLOWED_KEYS = {"scene", "subjects", "actions", "environments", "embedding"}
# Similarities are compared at this many decimals so that mathematically equal
# cosines, which can differ in the last ulp depending on summation order,
# tie exactly and fall back to index order.
SIM_DECIMALS = 12


@dataclass(frozen=True)
class Modifier:
    text: str
    category: str

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("modifier text must be non-empty")
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown modifier category {self.category!r}")
        object.__setattr__(self, "text", self.text.strip())

    def to_dict(self) -> dict:
        return {"text": self.text, "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> Modifier:
        return cls(d["text"], d["category"])


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValidationError("embedding must have positive dimension")
        if not all(math.isfinite(v) for v in values):
            raise ValidationError("embedding has non-finite components")
        if math.sqrt(math.fsum(v * v for v in values)) == 0.0:
            raise ValidationError("zero embedding vector")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class EmbeddingClient(Protocol):
    backend_id: str
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


@dataclass(frozen=True)
class SceneEntry:
    scene_text: str
    modifiers: tuple[Modifier, ...]
    embedding: EmbeddingVector | None = None

    def __post_init__(self) -> None:
        if not self.scene_text.strip():
            raise ValidationError("empty scene_text")
        if not self.modifiers:
            raise ValidationError("scene has no modifiers")

    def by_category(self, category: str) -> list[Modifier]:
        return [m for m in self.modifiers if m.category == category]


@dataclass(frozen=True)
class RetrievalConfig:
    tau: float = 0.5
    top_k: int = 3
    max_scenes: int = 8

    def __post_init__(self) -> None:
        if not (-1.0 <= self.tau <= 1.0):
            raise ValidationError(f"tau must lie in [-1, 1], got {self.tau}")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if self.max_scenes < 1:
            raise ValidationError("max_scenes must be >= 1")


@dataclass(frozen=True)
class Match:
    scene_index: int
    similarity: float
    selected_modifiers: tuple[Modifier, ...]
    scene_text: str = ""

    def to_dict(self) -> dict:
        return {
            "scene_index": self.scene_index,
            "scene_text": self.scene_text,
            "similarity": self.similarity,
            "selected_modifiers": [m.to_dict() for m in self.selected_modifiers],
        }


@dataclass(frozen=True)
class RetrievedContext:
    matches: tuple[Match, ...]
    intent_embedding: EmbeddingVector
    tau: float = 0.5

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "matches": [m.to_dict() for m in self.matches],
            "intent_embedding": list(self.intent_embedding.values),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RetrievedContext:
        matches = tuple(
            Match(
                scene_index=int(m["scene_index"]),
                similarity=float(m["similarity"]),
                selected_modifiers=tuple(Modifier.from_dict(x) for x in m["selected_modifiers"]),
                scene_text=m.get("scene_text", ""),
            )
            for m in d["matches"]
        )
        return cls(matches, EmbeddingVector(tuple(d["intent_embedding"])), float(d.get("tau", 0.5)))


@dataclass(frozen=True)
class RelationDatabase:
    entries: tuple[SceneEntry, ...]
    _unit: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.entries:
            raise EmptyDatabase()
        if all(e.embedding is not None for e in self.entries):
            dims = {e.embedding.dim for e in self.entries}
            if len(dims) != 1:
                raise ValidationError(f"mixed embedding dimensions in database: {sorted(dims)}")
            mat = np.array([e.embedding.values for e in self.entries], dtype=np.float64)
            mat /= np.linalg.norm(mat, axis=1, keepdims=True)
            mat.setflags(write=False)
            object.__setattr__(self, "_unit", mat)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_embeddings(self) -> bool:
        return self._unit is not None

    @property
    def content_hash(self) -> str:
        return hash_obj(
            [
                {
                    "scene": e.scene_text,
                    "modifiers": [m.to_dict() for m in e.modifiers],
                    "embedding": list(e.embedding.values) if e.embedding else None,
                }
                for e in self.entries
            ]
        )

    def with_embeddings(self, embedder: EmbeddingClient, max_workers: int = 8) -> RelationDatabase:
        """Fill in missing embeddings; results merge back by entry index."""
        missing = [i for i, e in enumerate(self.entries) if e.embedding is None]
        for i, e in enumerate(self.entries):
            if e.embedding is not None and e.embedding.dim != embedder.dim:
                raise MalformedRecord(i + 1, f"embedding dim {e.embedding.dim} != backend dim {embedder.dim}")
        if not missing:
            return self
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            vectors = list(pool.map(lambda i: embedder.embed(self.entries[i].scene_text), missing))
        entries = list(self.entries)
        for i, vec in zip(missing, vectors):
            entries[i] = SceneEntry(entries[i].scene_text, entries[i].modifiers, vec)
        return RelationDatabase(tuple(entries))


def _parse_line(line_no: int, raw: str) -> SceneEntry:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, "record is not an object")
    unknown = set(obj) - _ALLOWED_KEYS
    if unknown:
        raise MalformedRecord(line_no, f"unknown keys {sorted(unknown)}")
    scene = obj.get("scene")
    if not isinstance(scene, str):
        raise MalformedRecord(line_no, "missing scene")
    if not scene.strip():
        raise MalformedRecord(line_no, "empty scene_text")
    modifiers: list[Modifier] = []
    for category in CATEGORIES:
        items = obj.get(_FILE_KEYS[category], [])
        if not isinstance(items, list):
            raise MalformedRecord(line_no, f"{_FILE_KEYS[category]} must be a list")
        for item in items:
            if not isinstance(item, str) or not item.strip():
                raise MalformedRecord(line_no, f"empty or non-string modifier in {_FILE_KEYS[category]}")
            modifiers.append(Modifier(item, category))
    if not modifiers:
        raise MalformedRecord(line_no, "scene has no modifiers")
    embedding = None
    if obj.get("embedding") is not None:
        values = obj["embedding"]
        if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
        ):
            raise MalformedRecord(line_no, "embedding must be an array of numbers")
        try:
            embedding = EmbeddingVector(tuple(values))
        except ValidationError as exc:
            raise MalformedRecord(line_no, str(exc)) from None
    return SceneEntry(scene.strip(), tuple(modifiers), embedding)


def load_database(
    source: IO[bytes] | IO[str] | bytes | str,
    embedder: EmbeddingClient | None = None,
) -> RelationDatabase:
    """Parse a JSON-Lines relation database.

    With an ``embedder``, precomputed embeddings are checked against its
    dimension and missing ones are computed.
    """
    data = source if isinstance(source, (bytes, str)) else source.read()
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRecord(0, f"not UTF-8: {exc}") from None
    entries = []
    for line_no, raw in enumerate(data.splitlines(), start=1):
        if not raw.strip():
            continue
        entries.append(_parse_line(line_no, raw))
    if not entries:
        raise EmptyDatabase()
    db = RelationDatabase(tuple(entries))
    if embedder is not None:
        db = db.with_embeddings(embedder)
    logger.info("loaded relation database with %d scenes", len(db))
    return db


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(a.dim, b.dim)
    x, y = a.as_array(), b.as_array()
    sim = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return min(1.0, max(-1.0, sim))


def select_modifiers(entry: SceneEntry, top_k: int) -> tuple[Modifier, ...]:
    out: list[Modifier] = []
    for category in CATEGORIES:
        out.extend(entry.by_category(category)[:top_k])
    return tuple(out)


def retrieve(
    intent: str,
    db: RelationDatabase,
    cfg: RetrievalConfig,
    embedder: EmbeddingClient,
) -> RetrievedContext:
    if not intent.strip():
        raise ValidationError("intent must be non-empty")
    if not db.has_embeddings:
        raise ValidationError("database has entries without embeddings; load it with an embedder")
    query = embedder.embed(intent)
    if query.dim != db._unit.shape[1]:
        raise DimensionMismatch(query.dim, db._unit.shape[1])
    q = query.as_array()
    sims = np.round(np.clip(db._unit @ (q / np.linalg.norm(q)), -1.0, 1.0), SIM_DECIMALS)
    hits = np.nonzero(sims > cfg.tau)[0]
    # stable sort on -sim keeps ascending index among ties
    order = hits[np.argsort(-sims[hits], kind="stable")][: cfg.max_scenes]
    matches = tuple(
        Match(
            scene_index=int(i),
            similarity=float(sims[i]),
            selected_modifiers=select_modifiers(db.entries[i], cfg.top_k),
            scene_text=db.entries[i].scene_text,
        )
        for i in order
    )
    return RetrievedContext(matches, query, cfg.tau)


def flatten_modifiers(ctx: RetrievedContext) -> list[Modifier]:
    seen: set[str] = set()
    out: list[Modifier] = []
    for match in ctx.matches:
        for modifier in match.selected_modifiers:
            key = modifier.text.casefold()
            if key not in seen:
                seen.add(key)
                out.append(modifier)
    return out


def iter_jsonl(entries: Iterable[SceneEntry]) -> Iterable[str]:
    """Serialize entries back into the database line format."""
    for e in entries:
        obj: dict = {_FILE_KEYS[c]: [m.text for m in e.by_category(c)] for c in CATEGORIES}
        obj["scene"] = e.scene_text
        if e.embedding is not None:
            obj["embedding"] = list(e.embedding.values)
        yield json.dumps(obj, ensure_ascii=False)
