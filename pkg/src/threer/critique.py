"""Optional vision-language critique loop (off by default).

A critic scores the winning video against the user intent and the prompt
that produced it, and proposes a rewritten prompt. With ``guard`` on, a
regenerated video only replaces the incumbent when it scores strictly
higher under the question bank.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from threer.clients.base import ChatRequest, CritiqueClient, GenerationParams, VideoArtifact, VideoGenerator, VqaClient
from threer.errors import ClientError, ContractViolation, CritiqueSchemaError, ValidationError
from threer.prompts import load_template
from threer.ranking import QuestionBank, ScoreReport, VqaCache, score_video

logger = logging.getLogger(__name__)

METRICS = ("A_TV", "C_T", "F_C", "Q_V")
CRITIQUE_TEMPLATE = "critique_v1.txt"
CRITIQUE_USER_MESSAGE = "Analyze the attached video and respond with the JSON object."


@dataclass(frozen=True)
class CritiqueReport:
    user_prompt_intent: str
    metric: str
    score: int
    observation: str
    root_cause: str
    p_new: str
    meta_instruction: str

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise CritiqueSchemaError(f"metric {self.metric!r} not in {METRICS}")
        if isinstance(self.score, bool) or not isinstance(self.score, int) or not 0 <= self.score <= 10:
            raise CritiqueSchemaError(f"score {self.score!r} not an integer in [0, 10]")
        if not self.p_new.strip():
            raise CritiqueSchemaError("P_new is empty")

    def to_dict(self) -> dict:
        return {
            "user_prompt_intent": self.user_prompt_intent,
            "metric": self.metric,
            "score": self.score,
            "observation": self.observation,
            "root_cause": self.root_cause,
            "p_new": self.p_new,
            "meta_instruction": self.meta_instruction,
        }


@dataclass(frozen=True)
class CritiqueLoopConfig:
    enabled: bool = False
    max_iterations: int = 2
    accept_threshold: int = 7
    guard: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not 0 <= self.accept_threshold <= 10:
            raise ValidationError("accept_threshold must lie in [0, 10]")

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "max_iterations": self.max_iterations,
            "accept_threshold": self.accept_threshold,
            "guard": self.guard,
        }


def render_critique_prompt(upi: str, dpo: str) -> tuple[str, str]:
    if not upi.strip() or not dpo.strip():
        raise ValidationError("user intent and description prompt must be non-empty")
    system = load_template(CRITIQUE_TEMPLATE).format(USER_PROMPT_INTENT=upi, DESCRIPTION_PROMPT_OLD=dpo)
    return system, CRITIQUE_USER_MESSAGE


def _squash(value) -> str:
    if value is None:
        return ""
    if not isinstance(value, str):
        raise CritiqueSchemaError(f"expected a string, got {type(value).__name__}")
    return " ".join(value.split())


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    m = re.search(r"```(?:json)?\s*(.*?)(?:```|$)", text, re.DOTALL)
    return m.group(1).strip() if m else text


def _loads(text: str) -> dict:
    try:
        # strict=False: wrapped transcripts carry raw newlines inside strings
        obj = json.loads(text, strict=False)
    except json.JSONDecodeError as exc:
        raise CritiqueSchemaError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise CritiqueSchemaError("top-level value is not an object")
    return obj


def _report_from(obj: dict, upi: str = "") -> CritiqueReport:
    if "prompt_analysis" in obj or "prescription" in obj:
        try:
            analysis = obj["prompt_analysis"]
            metrics = analysis["bottleneck_flaw_metrics"]
            prescription = obj["prescription"]
            return CritiqueReport(
                user_prompt_intent=_squash(analysis.get("user_prompt_intent", upi)),
                metric=metrics["metric"],
                score=metrics["score"],
                observation=_squash(metrics.get("observation")),
                root_cause=_squash(analysis.get("diagnosis", {}).get("root_cause")),
                p_new=_squash(prescription["P_new"]),
                meta_instruction=_squash(prescription.get("meta_instruction")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise CritiqueSchemaError(f"missing field {exc}") from None
    if "metrics" in obj and "prompt_new" in obj:
        # iteration record shape: {"description_prompt_old", "metrics", "prompt_new"}
        metrics = obj["metrics"]
        if not isinstance(metrics, dict) or "metric" not in metrics or "score" not in metrics:
            raise CritiqueSchemaError("metrics block lacks metric/score")
        return CritiqueReport(
            user_prompt_intent=upi,
            metric=metrics["metric"],
            score=metrics["score"],
            observation=_squash(metrics.get("observation")),
            root_cause=_squash(obj.get("root_cause")),
            p_new=_squash(obj["prompt_new"]),
            meta_instruction=_squash(obj.get("meta_instruction")),
        )
    raise CritiqueSchemaError("object matches neither the critique schema nor an iteration record")


def parse_critique(raw: str, upi: str = "") -> CritiqueReport:
    return _report_from(_loads(_strip_fences(raw)), upi)


def parse_critique_trail(text: str) -> tuple[str, list[tuple[str, CritiqueReport]]]:
    """Parse a serialized critique trail into ``(user_prompt, [(dpo, report), ...])``.

    Accepts complete JSON objects as well as bare ``"key": value`` fragments
    with trailing commas.
    """
    body = text.strip().rstrip(",").strip()
    if not body.startswith("{"):
        body = "{" + body + "}"
    body = re.sub(r",\s*([}\]])", r"\1", body)
    obj = _loads(body)
    upi = _squash(obj.get("user_prompt", ""))
    keys = sorted((k for k in obj if re.fullmatch(r"Iterations_\d+", k)), key=lambda k: int(k.split("_")[1]))
    if not keys:
        raise CritiqueSchemaError("no Iterations_k entries")
    trail = []
    for k in keys:
        it = obj[k]
        if not isinstance(it, dict):
            raise CritiqueSchemaError(f"{k} is not an object")
        trail.append((_squash(it.get("description_prompt_old")), _report_from(it, upi)))
    return upi, trail


def trail_to_dict(upi: str, steps: list[dict]) -> dict:
    out: dict = {"user_prompt": upi}
    for k, step in enumerate(steps, start=1):
        report = step["report"]
        out[f"Iterations_{k}"] = {
            "description_prompt_old": step["dpo"],
            "metrics": {"metric": report["metric"], "score": report["score"], "observation": report["observation"]},
            "prompt_new": report["p_new"],
            "regenerated_video": step.get("video_id"),
            "regenerated_total": step.get("total"),
            "kept": step.get("kept", False),
        }
    return out


@dataclass
class CritiqueOutcome:
    video: VideoArtifact
    report: ScoreReport
    reports: list[CritiqueReport] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    stopped: str = ""

    def to_dict(self, upi: str) -> dict:
        return {
            "final_video": self.video.id,
            "final_total": self.report.weighted_total,
            "stopped": self.stopped,
            "trail": trail_to_dict(upi, self.steps),
        }


def critique_iterate(
    winner: VideoArtifact,
    winner_report: ScoreReport,
    upi: str,
    dpo: str,
    critic: CritiqueClient,
    t2v: VideoGenerator,
    vqa: VqaClient,
    bank: QuestionBank,
    cfg: CritiqueLoopConfig,
    *,
    params: GenerationParams | None = None,
    vqa_cache: VqaCache | None = None,
    seed: int | None = None,
) -> CritiqueOutcome:
    if not cfg.enabled:
        raise ValidationError("critique loop is disabled")
    params = params or GenerationParams()
    incumbent, incumbent_report = winner, winner_report
    current, current_dpo = winner, dpo
    outcome = CritiqueOutcome(incumbent, incumbent_report)
    for iteration in range(cfg.max_iterations):
        system, user = render_critique_prompt(upi, current_dpo)
        try:
            raw = critic.critique(current, ChatRequest(system, user, temperature=0.0, seed=seed, max_tokens=2048))
            report = parse_critique(raw, upi)
        except (ClientError, CritiqueSchemaError, ContractViolation) as exc:
            logger.warning("critique iteration %d aborted: %s", iteration + 1, exc)
            outcome.stopped = f"error: {exc}"
            break
        outcome.reports.append(report)
        step = {"dpo": current_dpo, "report": report.to_dict()}
        outcome.steps.append(step)
        if report.score >= cfg.accept_threshold:
            outcome.stopped = "accepted"
            break
        try:
            regen_params = GenerationParams(params.seed + iteration + 1, params.frames, params.fps, params.extra)
            video = t2v.generate_video(report.p_new, regen_params)
            rescored = score_video(video, upi, bank, vqa, candidate_index=winner_report.candidate_index, cache=vqa_cache)
        except (ClientError, ContractViolation) as exc:
            logger.warning("regeneration in iteration %d failed: %s", iteration + 1, exc)
            outcome.stopped = f"error: {exc}"
            break
        keep = rescored.weighted_total > incumbent_report.weighted_total or not cfg.guard
        step.update(video_id=video.id, total=rescored.weighted_total, kept=keep)
        if keep:
            incumbent, incumbent_report = video, rescored
        current, current_dpo = video, report.p_new
    else:
        outcome.stopped = "max_iterations"
    outcome.video, outcome.report = incumbent, incumbent_report
    return outcome
