from __future__ import annotations

import json

import pytest

from threer.clients.base import ArtifactStore, GenerationParams
from threer.clients.mock import MockCritic, MockVideoGenerator, MockVqa
from threer.critique import (
    CritiqueLoopConfig,
    CritiqueReport,
    critique_iterate,
    parse_critique,
    parse_critique_trail,
    render_critique_prompt,
)
from threer.errors import ClientError, CritiqueSchemaError, ErrorKind, ValidationError
from threer.ranking import default_bank, score_video

from conftest import FIXTURES, GOLDEN

TEDDY_UPI = "Teddy bear and 3 real bear"
TEDDY_DPO = (
    "Teddy bear and a real bear are playing together, with the teddy bear being a stuffed toy, "
    "while the real bear is a live animal."
)


def test_critique_prompt_matches_golden():
    system, user = render_critique_prompt(TEDDY_UPI, TEDDY_DPO)
    assert system == (GOLDEN / "critique_teddy.txt").read_text(encoding="utf-8")
    assert "STRICT JSON OUTPUT SCHEMA" in system
    assert "PHASE 2: ROOT CAUSE DIAGNOSIS" in system
    assert system.count(TEDDY_UPI) == 2
    assert '"prompt_analysis": {' in system
    assert user


@pytest.mark.parametrize(
    "name,upi,scores",
    [
        ("critique_trail_teddy.txt", TEDDY_UPI, [2, 0]),
        ("critique_trail_bird.txt", "A small bird sits atop a blooming flower stem.", [6, 2]),
    ],
)
def test_recorded_trails_parse(name, upi, scores):
    parsed_upi, trail = parse_critique_trail((FIXTURES / name).read_text(encoding="utf-8"))
    assert parsed_upi == upi
    assert [r.metric for _, r in trail] == ["A_TV", "A_TV"]
    assert [r.score for _, r in trail] == scores
    assert all(r.user_prompt_intent == upi for _, r in trail)
    # iteration 2 critiques the prompt proposed by iteration 1
    assert trail[1][0] == trail[0][1].p_new


def test_teddy_trail_text_is_whitespace_normalized():
    _, trail = parse_critique_trail((FIXTURES / "critique_trail_teddy.txt").read_text(encoding="utf-8"))
    assert trail[0][0] == TEDDY_DPO
    assert "\n" not in trail[0][1].observation


def test_schema_response_parses():
    report = parse_critique((FIXTURES / "critique_valid.json").read_text(encoding="utf-8"))
    assert (report.metric, report.score) == ("A_TV", 4)
    assert report.p_new.startswith("A small bird (KEYWORD:1.4)")
    assert report.root_cause


def test_fenced_response_parses():
    raw = "```json\n" + (FIXTURES / "critique_valid.json").read_text(encoding="utf-8") + "\n```"
    assert parse_critique(raw).score == 4


@pytest.mark.parametrize("name", ["critique_bad_metric.json", "critique_bad_score.json"])
def test_malformed_fixtures_rejected(name):
    with pytest.raises(CritiqueSchemaError):
        parse_critique((FIXTURES / name).read_text(encoding="utf-8"))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d["prompt_analysis"]["bottleneck_flaw_metrics"].update(score="5"),
        lambda d: d["prompt_analysis"]["bottleneck_flaw_metrics"].update(score=True),
        lambda d: d["prompt_analysis"]["bottleneck_flaw_metrics"].update(score=-1),
        lambda d: d["prescription"].update(P_new="  "),
        lambda d: d["prescription"].pop("P_new"),
        lambda d: d.pop("prompt_analysis"),
    ],
)
def test_schema_violations(mutate):
    data = json.loads((FIXTURES / "critique_valid.json").read_text(encoding="utf-8"))
    mutate(data)
    with pytest.raises(CritiqueSchemaError):
        parse_critique(json.dumps(data))


def test_non_json_rejected():
    with pytest.raises(CritiqueSchemaError):
        parse_critique("the video looks fine")
    with pytest.raises(CritiqueSchemaError):
        parse_critique_trail('"user_prompt": "x"')


def test_report_validation():
    with pytest.raises(CritiqueSchemaError):
        CritiqueReport("u", "A_TV", 11, "", "", "p", "")


# --- loop -------------------------------------------------------------------------------------


@pytest.fixture
def setup(tmp_path):
    store = ArtifactStore(tmp_path)
    t2v = MockVideoGenerator(store, seed=1)
    winner = t2v.generate_video("a barn at dawn", GenerationParams(seed=0))
    bank = default_bank()
    # the incumbent answers yes to everything, regenerated videos answer no
    vqa = MockVqa(mode=lambda video, q: 1.0 if video.id == winner.id else 0.0)
    report = score_video(winner, "a barn", bank, vqa)
    return {"t2v": t2v, "winner": winner, "bank": bank, "vqa": vqa, "report": report}


def _iterate(s, critic, cfg, vqa=None):
    return critique_iterate(
        s["winner"], s["report"], "a barn", "a barn at dawn", critic, s["t2v"], vqa or s["vqa"], s["bank"], cfg
    )


def test_disabled_loop_refuses_to_run(setup):
    with pytest.raises(ValidationError):
        _iterate(setup, MockCritic(), CritiqueLoopConfig())


def test_accepting_score_exits_early(setup):
    critic = MockCritic(scores=[8])
    outcome = _iterate(setup, critic, CritiqueLoopConfig(enabled=True, max_iterations=3))
    assert critic.calls == 1
    assert setup["t2v"].calls == 1
    assert outcome.stopped == "accepted"
    assert outcome.video == setup["winner"]


def test_exactly_max_iterations_and_dpo_chaining(setup):
    critic = MockCritic(scores=[2, 3, 9])
    seen = []
    original = critic._critique_once

    def spy(video, req):
        seen.append(req.system_prompt)
        return original(video, req)

    critic._critique_once = spy
    outcome = _iterate(setup, critic, CritiqueLoopConfig(enabled=True, max_iterations=2))
    assert critic.calls == 2
    assert setup["t2v"].calls == 3
    assert outcome.stopped == "max_iterations"
    assert outcome.reports[0].p_new in seen[1]


def test_guard_keeps_incumbent_when_regeneration_is_worse(setup):
    outcome = _iterate(setup, MockCritic(scores=[2]), CritiqueLoopConfig(enabled=True, max_iterations=2))
    assert outcome.video == setup["winner"]
    assert outcome.report.weighted_total == setup["report"].weighted_total
    assert [s["kept"] for s in outcome.steps] == [False, False]


def test_without_guard_the_latest_regeneration_wins(setup):
    cfg = CritiqueLoopConfig(enabled=True, max_iterations=1, guard=False)
    outcome = _iterate(setup, MockCritic(scores=[2]), cfg)
    assert outcome.video != setup["winner"]
    assert outcome.report.weighted_total == 0.0


def test_strictly_better_regeneration_replaces_incumbent(setup):
    vqa = MockVqa(mode=lambda video, q: 0.0 if video.id == setup["winner"].id else 1.0)
    report = score_video(setup["winner"], "a barn", setup["bank"], vqa)
    outcome = critique_iterate(
        setup["winner"], report, "a barn", "a barn at dawn", MockCritic(scores=[2]), setup["t2v"], vqa,
        setup["bank"], CritiqueLoopConfig(enabled=True, max_iterations=1),
    )
    assert outcome.video != setup["winner"]
    assert outcome.report.weighted_total > report.weighted_total


def test_critic_failure_returns_incumbent(setup):
    class Broken(MockCritic):
        def _critique_once(self, video, req):
            raise ClientError(ErrorKind.CONTENT_POLICY, "refused")

    outcome = _iterate(setup, Broken(), CritiqueLoopConfig(enabled=True))
    assert outcome.video == setup["winner"]
    assert outcome.stopped.startswith("error")


def test_unparseable_critique_returns_incumbent(setup):
    class Chatty(MockCritic):
        def _critique_once(self, video, req):
            return "I think the video is nice."

    outcome = _iterate(setup, Chatty(), CritiqueLoopConfig(enabled=True))
    assert outcome.video == setup["winner"]
    assert outcome.reports == []

