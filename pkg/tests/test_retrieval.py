from __future__ import annotations

import json
import math
import operator
import random
import time

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from threer.clients.mock import HashEmbedder
from threer.errors import DimensionMismatch, EmptyDatabase, MalformedRecord, ValidationError
from threer.retrieval import (
    CATEGORIES,
    SIM_DECIMALS,
    EmbeddingVector,
    Modifier,
    RelationDatabase,
    RetrievalConfig,
    RetrievedContext,
    SceneEntry,
    cosine_similarity,
    flatten_modifiers,
    iter_jsonl,
    load_database,
    retrieve,
)

from conftest import BARN_INTENT, DEMO_DB

# (1,2,3).(4,5,6) = 32 / sqrt(14 * 77), evaluated at 40 digits with mpmath
COSINE_123_456 = 0.9746318461970762710785724911

VOCAB = (
    "barn horse field river boat lake city tower street dog cat bird flower tree forest snow "
    "mountain cabin sunset night rain market bridge garden child farmer teddy bear fish shark "
    "beach ocean train station kitchen chef guitar dancer castle desert"
).split()


def synthetic_db(n: int, rng: random.Random) -> list[dict]:
    lines = []
    for i in range(n):
        scene = " ".join(rng.sample(VOCAB, rng.randint(2, 6)))
        rec = {"scene": scene}
        for key in ("subjects", "actions", "environments"):
            rec[key] = [f"{key[:-1]} {i}-{j} {rng.choice(VOCAB)}" for j in range(rng.randint(0, 5))]
        if not any(rec[k] for k in ("subjects", "actions", "environments")):
            rec["subjects"] = [f"subject {i}"]
        lines.append(rec)
    return lines


def brute_force(intent_vec, scene_vecs, records, tau, top_k, max_scenes):
    """Pure-Python scan: fsum dot products, rounded like the index."""

    def cos(a, b):
        dot = math.fsum(map(operator.mul, a, b))
        na = math.sqrt(math.fsum(x * x for x in a))
        nb = math.sqrt(math.fsum(x * x for x in b))
        return round(max(-1.0, min(1.0, dot / (na * nb))), SIM_DECIMALS)

    scored = [(cos(vec, intent_vec), i) for i, vec in enumerate(scene_vecs)]
    hits = sorted(((s, i) for s, i in scored if s > tau), key=lambda t: (-t[0], t[1]))[:max_scenes]
    out = []
    for s, i in hits:
        rec = records[i]
        mods = []
        for key in ("subjects", "actions", "environments"):
            mods.extend(rec[key][:top_k])
        out.append((i, mods))
    return out


def test_oracle_equivalence_on_synthetic_database():
    rng = random.Random(1234)
    records = synthetic_db(1000, rng)
    embedder = HashEmbedder(dim=256, seed=7)
    started = time.perf_counter()
    db = load_database("\n".join(json.dumps(r) for r in records), embedder)
    scene_vecs = [list(e.embedding.values) for e in db.entries]
    for _ in range(50):
        intent = " ".join(rng.sample(VOCAB, rng.randint(1, 4)))
        tau = rng.uniform(-0.2, 0.8)
        top_k = rng.randint(1, 5)
        max_scenes = rng.randint(1, 40)
        ctx = retrieve(intent, db, RetrievalConfig(tau, top_k, max_scenes), embedder)
        expected = brute_force(list(embedder.embed(intent).values), scene_vecs, records, tau, top_k, max_scenes)
        got = [(m.scene_index, [x.text for x in m.selected_modifiers]) for m in ctx.matches]
        assert got == expected
    assert time.perf_counter() - started < 10.0


finite = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda x: abs(x) > 1e-3)
vectors = st.integers(1, 12).flatmap(lambda d: st.tuples(st.lists(finite, min_size=d, max_size=d), st.lists(finite, min_size=d, max_size=d)))


@given(vectors)
def test_cosine_self_similarity_and_symmetry(pair):
    a, b = EmbeddingVector(tuple(pair[0])), EmbeddingVector(tuple(pair[1]))
    assert abs(cosine_similarity(a, a) - 1.0) <= 1e-12
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


@given(vectors, st.floats(1e-3, 1e3))
def test_cosine_positive_scale_invariance(pair, scale):
    a, b = EmbeddingVector(tuple(pair[0])), EmbeddingVector(tuple(pair[1]))
    scaled = EmbeddingVector(tuple(x * scale for x in pair[0]))
    assert abs(cosine_similarity(scaled, b) - cosine_similarity(a, b)) <= 1e-9


def test_cosine_hand_case():
    got = cosine_similarity(EmbeddingVector((1, 2, 3)), EmbeddingVector((4, 5, 6)))
    assert abs(got - COSINE_123_456) <= 1e-9
    assert abs(got - 0.974631846) <= 1e-9


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_similarity(EmbeddingVector((1.0, 0.0)), EmbeddingVector((1.0, 0.0, 0.0)))


def test_zero_and_nonfinite_vectors_rejected():
    with pytest.raises(ValidationError):
        EmbeddingVector((0.0, 0.0))
    with pytest.raises(ValidationError):
        EmbeddingVector((1.0, float("nan")))


def _db(*scenes: tuple[str, tuple[float, ...]]) -> RelationDatabase:
    return RelationDatabase(
        tuple(SceneEntry(text, (Modifier(f"{text} subject", "subject"),), EmbeddingVector(vec)) for text, vec in scenes)
    )


class FixedEmbedder:
    backend_id = "fixed"

    def __init__(self, vec):
        self.dim = len(vec)
        self.vec = EmbeddingVector(tuple(vec))

    def embed(self, text):
        return self.vec


def test_threshold_is_strict():
    db = _db(("exact", (1.0, 0.0)), ("diag", (1.0, 1.0)))
    # similarity of "diag" to (1, 0) is 1/sqrt(2) ~ 0.7071
    ctx = retrieve("q", db, RetrievalConfig(tau=1.0), FixedEmbedder((1.0, 0.0)))
    assert ctx.matches == ()
    ctx = retrieve("q", db, RetrievalConfig(tau=0.5), FixedEmbedder((1.0, 0.0)))
    assert [m.scene_index for m in ctx.matches] == [0, 1]


def test_ties_resolve_to_lower_index():
    db = _db(("a", (1.0, 1.0)), ("b", (2.0, 2.0)), ("c", (3.0, 3.0)))
    ctx = retrieve("q", db, RetrievalConfig(tau=0.1), FixedEmbedder((1.0, 0.0)))
    assert [m.scene_index for m in ctx.matches] == [0, 1, 2]


def test_max_scenes_caps_matches():
    db = _db(*((f"s{i}", (1.0, i / 10)) for i in range(12)))
    ctx = retrieve("q", db, RetrievalConfig(tau=-1.0, max_scenes=8), FixedEmbedder((1.0, 0.0)))
    assert len(ctx.matches) == 8


def test_top_k_is_per_category():
    entry = SceneEntry(
        "s",
        tuple(Modifier(f"{c} {i}", c) for c in CATEGORIES for i in range(4)),
        EmbeddingVector((1.0,)),
    )
    ctx = retrieve("q", RelationDatabase((entry,)), RetrievalConfig(tau=0.0, top_k=2), FixedEmbedder((1.0,)))
    assert [m.text for m in ctx.matches[0].selected_modifiers] == [
        "subject 0", "subject 1", "action 0", "action 1", "environment 0", "environment 1"
    ]


def test_query_dimension_mismatch():
    db = _db(("a", (1.0, 0.0)))
    with pytest.raises(DimensionMismatch):
        retrieve("q", db, RetrievalConfig(), FixedEmbedder((1.0, 0.0, 0.0)))


def test_flatten_dedups_case_insensitively():
    m1 = SceneEntry("a", (Modifier("in a barn", "environment"),), EmbeddingVector((1.0, 0.0)))
    m2 = SceneEntry("b", (Modifier("In a barn", "environment"), Modifier("hay", "subject")), EmbeddingVector((1.0, 0.1)))
    ctx = retrieve("q", RelationDatabase((m1, m2)), RetrievalConfig(tau=0.0), FixedEmbedder((1.0, 0.0)))
    assert [m.text for m in flatten_modifiers(ctx)] == ["in a barn", "hay"]


def test_context_round_trips_through_dict():
    db = load_database(DEMO_DB.read_bytes(), HashEmbedder())
    ctx = retrieve(BARN_INTENT, db, RetrievalConfig(), HashEmbedder())
    assert RetrievedContext.from_dict(json.loads(json.dumps(ctx.to_dict()))) == ctx


# --- loading ---------------------------------------------------------------------


def test_barn_scene_has_fourteen_modifiers(tmp_path):
    barn = json.loads(DEMO_DB.read_text().splitlines()[0])
    path = tmp_path / "barn.jsonl"
    path.write_text(json.dumps(barn) + "\n")
    db = load_database(path.read_bytes())
    assert len(db) == 1
    assert len(db.entries[0].modifiers) == 14
    assert {c: len(db.entries[0].by_category(c)) for c in CATEGORIES} == {"subject": 3, "action": 8, "environment": 3}


def test_barn_retrieval_returns_all_fourteen_when_top_k_allows():
    embedder = HashEmbedder()
    db = load_database(DEMO_DB.read_bytes(), embedder)
    ctx = retrieve(BARN_INTENT, db, RetrievalConfig(tau=0.5, top_k=8), embedder)
    assert ctx.matches[0].scene_index == 0
    assert len(flatten_modifiers(ctx)) == 14


def test_empty_scene_text_reports_line():
    text = '{"scene": "ok", "subjects": ["a"]}\n{"scene": "", "subjects": ["b"]}\n'
    with pytest.raises(MalformedRecord) as info:
        load_database(text)
    assert info.value.line_no == 2
    assert "empty scene_text" in str(info.value)


@pytest.mark.parametrize(
    "line",
    [
        "not json",
        "[1, 2]",
        '{"scene": "x"}',
        '{"scene": "x", "subjects": [""]}',
        '{"scene": "x", "subjects": ["a"], "colour": 1}',
        '{"scene": "x", "subjects": ["a"], "embedding": [0, 0]}',
        '{"scene": "x", "subjects": ["a"], "embedding": ["a"]}',
    ],
)
def test_malformed_lines(line):
    with pytest.raises(MalformedRecord):
        load_database(line)


def test_empty_database():
    with pytest.raises(EmptyDatabase):
        load_database("\n\n")


def test_embedding_dim_must_match_backend():
    line = json.dumps({"scene": "x", "subjects": ["a"], "embedding": [1.0, 2.0]})
    with pytest.raises(MalformedRecord):
        load_database(line, HashEmbedder(dim=8))


def test_jsonl_round_trip():
    db = load_database(DEMO_DB.read_bytes())
    again = load_database("\n".join(iter_jsonl(db.entries)))
    assert again.content_hash == db.content_hash


def test_unit_matrix_is_read_only():
    db = load_database(DEMO_DB.read_bytes(), HashEmbedder())
    with pytest.raises(ValueError):
        db._unit[0, 0] = 1.0
    assert np.allclose(np.linalg.norm(db._unit, axis=1), 1.0)


@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_raising_tau_never_adds_matches(t1, t2):
    assume(t1 <= t2)
    embedder = HashEmbedder(dim=64)
    db = _demo(embedder)
    low = {m.scene_index for m in retrieve(BARN_INTENT, db, RetrievalConfig(t1, max_scenes=100), embedder).matches}
    high = {m.scene_index for m in retrieve(BARN_INTENT, db, RetrievalConfig(t2, max_scenes=100), embedder).matches}
    assert high <= low


_DEMO_CACHE: dict = {}


def _demo(embedder):
    key = embedder.backend_id
    if key not in _DEMO_CACHE:
        _DEMO_CACHE[key] = load_database(DEMO_DB.read_bytes(), embedder)
    return _DEMO_CACHE[key]
