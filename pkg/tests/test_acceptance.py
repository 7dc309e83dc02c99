"""Acceptance criteria, one test each.

Every test reports a PASS or FAIL line in the "acceptance criteria" section
of the pytest terminal summary.
"""

from __future__ import annotations

import dataclasses
import json
import random
import time
from fractions import Fraction

import pytest

from threer.clients.base import ArtifactStore, VqaAnswer
from threer.clients.mock import HashEmbedder, MockVqa, mock_backends
from threer.critique import parse_critique, parse_critique_trail, render_critique_prompt
from threer.errors import CritiqueSchemaError
from threer.orchestrator import PipelineConfig, resume_run, run_pipeline
from threer.prompts import render_refinement_prompt
from threer.ranking import BANK_SIZE, ScoreReport, default_bank, score_video, select_best, weighted_sum
from threer.retrieval import EmbeddingVector, RetrievalConfig, cosine_similarity, flatten_modifiers, load_database, retrieve

from conftest import BARN_INTENT, DEMO_DB, FIXTURES, GOLDEN
from test_retrieval import brute_force, synthetic_db

PUBLISHED = (Fraction("1.1418"), Fraction("0.9544"), Fraction("0.4390"), Fraction("0.4293"), Fraction("0.3942"))


def _pipeline(root, backends=None, **kw):
    b = backends or mock_backends(root / "cache", seed=0)
    db = load_database(DEMO_DB.read_bytes(), b.embedder)
    result = run_pipeline(
        BARN_INTENT, db, PipelineConfig(), b, default_bank(), runs_dir=root / "runs", cache_dir=root / "cache", **kw
    )
    return result, b


def _calls(transcript) -> dict[str, int]:
    return {k: transcript.count(backend=k) for k in ("embed", "chat", "t2v", "vqa", "enhance", "critique")}


def test_retrieval_matches_brute_force_scan(acceptance):
    acceptance(1, "retrieval equals brute-force scan on 1,000 scenes x 50 configs in < 10 s")
    rng = random.Random(2024)
    records = synthetic_db(1000, rng)
    embedder = HashEmbedder(dim=256, seed=3)
    started = time.perf_counter()
    db = load_database("\n".join(json.dumps(r) for r in records), embedder)
    vecs = [list(e.embedding.values) for e in db.entries]
    nonempty = 0
    for _ in range(50):
        intent = " ".join(rng.sample(["barn", "horse", "river", "city", "dog", "snow", "chef", "beach"], rng.randint(1, 3)))
        tau, top_k, max_scenes = rng.uniform(-0.2, 0.8), rng.randint(1, 5), rng.randint(1, 40)
        ctx = retrieve(intent, db, RetrievalConfig(tau, top_k, max_scenes), embedder)
        got = [(m.scene_index, [x.text for x in m.selected_modifiers]) for m in ctx.matches]
        assert got == brute_force(list(embedder.embed(intent).values), vecs, records, tau, top_k, max_scenes)
        nonempty += bool(got)
    elapsed = time.perf_counter() - started
    assert nonempty > 10
    assert elapsed < 10.0


def test_cosine_correctness(acceptance):
    acceptance(2, "cosine self-similarity, symmetry, scale invariance and (1,2,3).(4,5,6) = 0.974631846")
    rng = random.Random(5)
    for _ in range(2000):
        d = rng.randint(1, 16)
        a = EmbeddingVector(tuple(rng.uniform(-100, 100) for _ in range(d)))
        b = EmbeddingVector(tuple(rng.uniform(-100, 100) for _ in range(d)))
        c = rng.uniform(1e-3, 1e3)
        assert abs(cosine_similarity(a, a) - 1.0) <= 1e-12
        assert cosine_similarity(a, b) == cosine_similarity(b, a)
        scaled = EmbeddingVector(tuple(x * c for x in a.values))
        assert abs(cosine_similarity(scaled, b) - cosine_similarity(a, b)) <= 1e-9
    hand = cosine_similarity(EmbeddingVector((1, 2, 3)), EmbeddingVector((4, 5, 6)))
    assert abs(hand - 0.974631846) <= 1e-9


def test_weighted_sum_exactness(acceptance, tmp_path):
    acceptance(3, "all-yes total 3.3587 +/- 1e-9, all-no 0, single-flip linearity for the five weights")
    bank = default_bank()
    video = ArtifactStore(tmp_path).put(b"frames", 16, 8.0, "a barn")
    yes = score_video(video, BARN_INTENT, bank, MockVqa(mode="yes")).weighted_total
    no = score_video(video, BARN_INTENT, bank, MockVqa(mode="no")).weighted_total
    assert abs(yes - 3.3587) <= 1e-9
    assert sum(PUBLISHED) == Fraction(33587, 10000)
    assert no == 0.0
    for i, w in enumerate(PUBLISHED):
        single = [0.0] * BANK_SIZE
        single[i] = 1.0
        assert weighted_sum(bank.weights, single) == float(w)


def test_argmax_properties(acceptance):
    acceptance(4, "select_best equals naive max, scale invariant, lowest-index ties, 10,000 trials in < 5 s")
    rng = random.Random(77)
    started = time.perf_counter()
    ties = 0
    for _ in range(10_000):
        weights = [rng.uniform(0.0, 2.0) for _ in range(BANK_SIZE)]
        n = rng.randint(1, 8)
        pool = [[float(rng.random() < 0.5) for _ in range(BANK_SIZE)] for _ in range(rng.randint(1, n))]
        answers = [rng.choice(pool) for _ in range(n)]

        def reports(ws):
            return [
                ScoreReport(i, tuple(VqaAnswer(q, s) for q, s in enumerate(a)), weighted_sum(ws, a), "bank")
                for i, a in enumerate(answers)
            ]

        base = reports(weights)
        totals = [r.weighted_total for r in base]
        naive = totals.index(max(totals))
        sel = select_best(base)
        assert sel.winner_index == naive
        ties += sel.tie_broken
        c = rng.uniform(0.01, 100.0)
        assert select_best(reports([w * c for w in weights])).winner_index == naive
    assert ties > 100
    assert time.perf_counter() - started < 5.0


def test_end_to_end_fidelity(acceptance, tmp_path):
    acceptance(5, "mock run makes 1 retrieval, |queue| merges, >=1 refine, 4 generations, 116 VQA, 1 enhancement, 61 frames, reproducible")
    result, b = _pipeline(tmp_path / "a")
    db = load_database(DEMO_DB.read_bytes(), b.embedder)
    queue = flatten_modifiers(retrieve(BARN_INTENT, db, PipelineConfig().retrieval, b.embedder))
    calls = _calls(result.transcript)
    assert calls["embed"] == 1
    assert calls["chat"] - len(queue) >= 1
    merges = [e for e in result.transcript.entries if e["backend"] == "chat" and "Modifier:" in e["request"]["user_message"]]
    assert len(merges) == len(queue)
    assert calls["t2v"] == 4
    assert calls["vqa"] == 116
    assert calls["enhance"] == 1
    assert [e["stage"] for e in result.record.stages].count("select") == 1
    assert result.video.frame_count == 61
    again, _ = _pipeline(tmp_path / "b")
    assert again.video.id == result.video.id
    assert again.record.stage_hashes() == result.record.stage_hashes()


def test_template_fidelity(acceptance):
    acceptance(6, "refinement and critique prompts byte-match the golden files")
    merged = "A tranquil tableau of a barn, a wooden structure standing quietly in the countryside."
    system, user = render_refinement_prompt(BARN_INTENT, merged)
    critique, _ = render_critique_prompt(
        "Teddy bear and 3 real bear",
        "Teddy bear and a real bear are playing together, with the teddy bear being a stuffed toy, "
        "while the real bear is a live animal.",
    )
    assert system == (GOLDEN / "refine_barn.system.txt").read_text(encoding="utf-8")
    assert user == (GOLDEN / "refine_barn.user.txt").read_text(encoding="utf-8")
    assert critique == (GOLDEN / "critique_teddy.txt").read_text(encoding="utf-8")
    assert "word limit: 100 words" in system
    assert "a single list of 4 strings" in system
    assert "STRICT JSON OUTPUT SCHEMA" in critique


def test_critique_parsing(acceptance, tmp_path):
    acceptance(7, "recorded trails parse to A_TV {2,0} and {6,2}, malformed fixtures rejected, no critique calls by default")
    for name, scores in (("critique_trail_teddy.txt", [2, 0]), ("critique_trail_bird.txt", [6, 2])):
        _, trail = parse_critique_trail((FIXTURES / name).read_text(encoding="utf-8"))
        assert [r.metric for _, r in trail] == ["A_TV", "A_TV"]
        assert [r.score for _, r in trail] == scores
    for name in ("critique_bad_metric.json", "critique_bad_score.json"):
        with pytest.raises(CritiqueSchemaError):
            parse_critique((FIXTURES / name).read_text(encoding="utf-8"))
    result, b = _pipeline(tmp_path)
    assert b.critic.calls == 0
    assert result.transcript.count(backend="critique") == 0


def test_cache_and_resume(acceptance, tmp_path):
    acceptance(8, "completed rerun makes zero calls; resume after a kill post-generation runs only ranking and enhancement")
    _pipeline(tmp_path / "done")
    rerun, b = _pipeline(tmp_path / "done")
    assert len(rerun.transcript) == 0
    assert sum(c.calls for c in (b.t2v, b.vqa, b.enhancer, b.critic)) == 0

    killed = {"now": True}

    def answer(video, question):
        if killed["now"]:
            raise KeyboardInterrupt
        return 1.0

    root = tmp_path / "killed"
    first = dataclasses.replace(mock_backends(root / "cache", seed=0), vqa=MockVqa(0, mode=answer))
    with pytest.raises(KeyboardInterrupt):
        _pipeline(root, backends=first)
    (run_dir,) = (root / "runs").iterdir()
    killed["now"] = False
    second = dataclasses.replace(mock_backends(root / "cache", seed=0), vqa=MockVqa(0, mode=answer))
    resumed = resume_run(run_dir.name, second, runs_dir=root / "runs", cache_dir=root / "cache")
    assert resumed.complete
    assert {e["backend"] for e in resumed.transcript.entries} == {"vqa", "enhance"}
    calls = _calls(resumed.transcript)
    assert (calls["vqa"], calls["enhance"]) == (116, 1)
    assert [e["stage"] for e in resumed.record.stages if e["resumed"]] == ["score", "select", "enhance"]
