"""End-to-end pipeline runs: retrieve, merge, refine, generate, score, select,
optionally critique, then enhance the winner.

Each stage's output is content-addressed in a stage cache and persisted in
the run directory::

    runs/<run_id>/
        config.json  record.json  transcript.jsonl
        retrieval.json  merged.txt  merge_steps.json  candidates.json
        videos/<n>.bin + videos/<n>.json
        scores/<n>.json  selection.json  critique.json
        final.bin + final.json

A run whose record is incomplete continues from its first unfinished stage.
"""

from __future__ import annotations

import contextvars
import dataclasses
import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from threer.cache import JsonFileDict, StageCache, stage_key
from threer.clients.base import Backends, GenerationParams, RetryPolicy, Transcript, VideoArtifact
from threer.critique import CritiqueLoopConfig, critique_iterate
from threer.errors import MissingArtifact, StageFailure, ThreeRError, UnknownRun, ValidationError
from threer.hashing import atomic_write, canonical_json, hash_obj, sha256_hex, write_json
from threer.prompts import (
    MERGE_TEMPERATURE,
    MERGE_TEMPLATE,
    REFINE_TEMPERATURE,
    REFINE_TEMPLATES,
    WORD_LIMIT,
    refine,
    run_merge,
    template_hashes,
)
from threer.ranking import QuestionBank, QuestionEntry, ScoreReport, VqaCache, score_video, select_best
from threer.retrieval import (
    Modifier,
    RelationDatabase,
    RetrievalConfig,
    flatten_modifiers,
    load_database,
    retrieve,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

STAGES = ("retrieve", "merge", "refine", "generate", "score", "select", "critique", "enhance")
ALGORITHM_STEP = {
    "retrieve": "Retrieval",
    "merge": "Refinement & Merging",
    "refine": "Refinement & Merging",
    "generate": "Generation",
    "score": "Ranking",
    "select": "Ranking",
    "critique": "Ranking",
    "enhance": "Enhancement",
}
RECORD_SCHEMA = 1


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.5
    top_k: int = 3
    max_scenes: int = 8
    n_candidates: int = 4
    target_frames: int = 61
    base_frames: int = 16
    fps: float = 8.0
    repair_attempts: int = 2
    merge_temperature: float = MERGE_TEMPERATURE
    refine_temperature: float = REFINE_TEMPERATURE
    word_limit: int = WORD_LIMIT
    critique: CritiqueLoopConfig = field(default_factory=CritiqueLoopConfig)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    parallelism: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        RetrievalConfig(self.tau, self.top_k, self.max_scenes)
        if self.n_candidates < 1:
            raise ValidationError("n_candidates must be >= 1")
        if self.base_frames < 1 or self.target_frames < self.base_frames:
            raise ValidationError("need 1 <= base_frames <= target_frames")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")
        if self.repair_attempts < 0:
            raise ValidationError("repair_attempts must be >= 0")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if self.word_limit < 1:
            raise ValidationError("word_limit must be >= 1")

    @property
    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(self.tau, self.top_k, self.max_scenes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["critique"] = self.critique.to_dict()
        d["retry"] = self.retry.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "critique" in kwargs:
            crit = kwargs["critique"]
            extra = set(crit) - {f.name for f in dataclasses.fields(CritiqueLoopConfig)}
            if extra:
                raise ValidationError(f"unknown critique keys: {sorted(extra)}")
            kwargs["critique"] = CritiqueLoopConfig(**crit)
        if "retry" in kwargs:
            kwargs["retry"] = RetryPolicy.from_dict(kwargs["retry"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    def config_hash(self) -> str:
        return hash_obj(self.to_dict())


class RunRecord:
    """Append-only ledger of one run; serialized as ``record.json``."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def new(cls, run_id: str, config_hash: str, template_hashes: dict, bank_id: str, backend_ids: dict) -> RunRecord:
        return cls(
            {
                "schema": RECORD_SCHEMA,
                "run_id": run_id,
                "config_hash": config_hash,
                "template_hashes": template_hashes,
                "bank_id": bank_id,
                "backend_ids": backend_ids,
                "stages": [],
                "sessions": 0,
                "status": "running",
                "final": None,
            }
        )

    @classmethod
    def load(cls, path: Path) -> RunRecord:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: Path) -> None:
        write_json(path, self.data)

    @property
    def run_id(self) -> str:
        return self.data["run_id"]

    @property
    def status(self) -> str:
        return self.data["status"]

    @property
    def stages(self) -> list[dict]:
        return self.data["stages"]

    @property
    def final(self) -> dict | None:
        return self.data["final"]

    def entry(self, stage: str) -> dict | None:
        return next((e for e in self.stages if e["stage"] == stage), None)

    def append(self, entry: dict) -> None:
        if self.entry(entry["stage"]) is not None:
            raise ValueError(f"stage {entry['stage']!r} already recorded")
        self.stages.append(entry)

    def stage_hashes(self) -> list[tuple[str, str, str]]:
        return [(e["stage"], e["key"], e["output_hash"]) for e in self.stages]


@dataclass
class RunResult:
    video: VideoArtifact | None
    record: RunRecord
    run_dir: Path
    transcript: Transcript

    @property
    def complete(self) -> bool:
        return self.record.status == "complete"


def _fan_out(fn: Callable[[Any], T], items: Sequence[Any], parallelism: int) -> list[T]:
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(contextvars.copy_context().run, fn, item) for item in items]
        return [f.result() for f in futures]


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingArtifact(f"recorded intermediate is missing: {path}") from None


class _Run:
    def __init__(
        self,
        *,
        intent: str,
        cfg: PipelineConfig,
        backends: Backends,
        bank: QuestionBank,
        db: RelationDatabase | None,
        db_hash: str,
        run_dir: Path,
        cache_dir: Path,
        record: RunRecord,
    ):
        self.intent = intent
        self.cfg = cfg
        self.backends = backends
        self.bank = bank
        self.db = db
        self.db_hash = db_hash
        self.run_dir = run_dir
        self.cache = StageCache(cache_dir)
        self.vqa_store = JsonFileDict(cache_dir / "vqa.json")
        self.vqa_cache = VqaCache(self.vqa_store)
        self.record = record
        self.transcript = Transcript()
        self.session = record.data["sessions"]
        self.transcript_offset = self._existing_transcript_len()
        self.outputs: dict[str, dict] = {}
        self._flushed = 0
        self.keys: dict[str, str] = {}
        self.template_hashes = record.data["template_hashes"]
        self.ids = backends.ids()

    def _existing_transcript_len(self) -> int:
        path = self.run_dir / "transcript.jsonl"
        if not path.exists():
            return 0
        with path.open(encoding="utf-8") as fh:
            return sum(1 for _ in fh)

    # --- keys -----------------------------------------------------------
    def key_for(self, stage: str) -> str:
        cfg = self.cfg
        ids = self.ids
        th = self.template_hashes
        if stage == "retrieve":
            parts = {
                "intent": self.intent,
                "db": self.db_hash,
                "retrieval": dataclasses.asdict(cfg.retrieval),
                "embed": ids["embed"],
            }
        elif stage == "merge":
            parts = {
                "prev": self.keys["retrieve"],
                "template": th[MERGE_TEMPLATE],
                "chat": ids["chat"],
                "seed": cfg.seed,
                "temperature": cfg.merge_temperature,
            }
        elif stage == "refine":
            parts = {
                "prev": self.keys["merge"],
                "templates": [th[name] for name in REFINE_TEMPLATES],
                "chat": ids["chat"],
                "seed": cfg.seed,
                "n": cfg.n_candidates,
                "repair_attempts": cfg.repair_attempts,
                "temperature": cfg.refine_temperature,
                "word_limit": cfg.word_limit,
            }
        elif stage == "generate":
            parts = {"prev": self.keys["refine"], "t2v": ids["t2v"], "seed": cfg.seed, "frames": cfg.base_frames, "fps": cfg.fps}
        elif stage == "score":
            parts = {"prev": self.keys["generate"], "bank": self.bank.bank_id, "vqa": ids["vqa"], "intent": self.intent}
        elif stage == "select":
            parts = {"prev": self.keys["score"]}
        elif stage == "critique":
            parts = {
                "prev": self.keys["select"],
                "critique": cfg.critique.to_dict(),
                "template": th["critique_v1.txt"],
                "critic": ids.get("critique"),
                "t2v": ids["t2v"],
                "vqa": ids["vqa"],
                "seed": cfg.seed,
                "frames": cfg.base_frames,
                "fps": cfg.fps,
            }
        elif stage == "enhance":
            prev = self.keys["critique"] if cfg.critique.enabled else self.keys["select"]
            parts = {"prev": prev, "enhance": ids["enhance"], "target_frames": cfg.target_frames, "intent": self.intent}
        else:
            raise ValueError(stage)
        return stage_key(stage, **parts)

    # --- video helpers --------------------------------------------------
    def _store_video(self, video: VideoArtifact, stem: Path) -> VideoArtifact:
        data = Path(video.storage_ref).read_bytes()
        target = stem.with_suffix(".bin")
        if not target.exists() or sha256_hex(target.read_bytes()) != video.id:
            atomic_write(target, data)
        write_json(stem.with_suffix(".json"), video.meta())
        return dataclasses.replace(video, storage_ref=str(target))

    def _resolve_video(self, meta: dict, stem: Path | None = None) -> VideoArtifact:
        meta = {k: meta[k] for k in ("id", "frame_count", "fps", "source_prompt")}
        if stem is not None:
            path = stem.with_suffix(".bin")
            if path.exists() and sha256_hex(path.read_bytes()) == meta["id"]:
                return VideoArtifact.from_meta(meta, str(path))
        store = self.backends.store
        if store is not None:
            video = store.load(meta["id"])
            if video is not None and sha256_hex(Path(video.storage_ref).read_bytes()) == meta["id"]:
                return video
        raise MissingArtifact(f"video {meta['id'][:12]} is not available in the run directory or artifact store")

    # --- stage executors --------------------------------------------------
    def exec_retrieve(self) -> tuple[dict, dict]:
        if self.db is None:
            raise ValidationError("retrieval needs the relation database")
        ctx = retrieve(self.intent, self.db, self.cfg.retrieval, self.backends.embedder)
        queue = flatten_modifiers(ctx)
        return {"context": ctx.to_dict(), "queue": [m.to_dict() for m in queue]}, {"matches": len(ctx.matches)}

    def exec_merge(self) -> tuple[dict, dict]:
        queue = [Modifier.from_dict(m) for m in self.outputs["retrieve"]["queue"]]
        state = run_merge(
            self.intent, queue, self.backends.chat, temperature=self.cfg.merge_temperature, seed=self.cfg.seed
        )
        return state.to_dict(), {"steps": len(queue)}

    def exec_refine(self) -> tuple[dict, dict]:
        cands = refine(
            self.intent,
            self.outputs["merge"]["merged"],
            self.backends.chat,
            self.cfg.n_candidates,
            repair_attempts=self.cfg.repair_attempts,
            temperature=self.cfg.refine_temperature,
            seed=self.cfg.seed,
            word_limit=self.cfg.word_limit,
            provenance={"retrieval_key": self.keys["retrieve"], "merge_key": self.keys["merge"]},
        )
        return cands.to_dict(), {"attempts": cands.attempts, "padded": sum(cands.padded), "warnings": list(cands.warnings)}

    def exec_generate(self) -> tuple[dict, dict]:
        prompts = self.outputs["refine"]["candidates"]

        def one(i: int) -> dict:
            seed = self.cfg.seed ^ i
            video = self.backends.t2v.generate_video(
                prompts[i], GenerationParams(seed, self.cfg.base_frames, self.cfg.fps)
            )
            return {"index": i, "seed": seed, **video.meta()}

        videos = _fan_out(one, range(len(prompts)), self.cfg.parallelism)
        return {"videos": videos}, {"count": len(videos)}

    def videos(self) -> list[VideoArtifact]:
        return [
            self._resolve_video(meta, self.run_dir / "videos" / str(meta["index"]))
            for meta in self.outputs["generate"]["videos"]
        ]

    def exec_score(self) -> tuple[dict, dict]:
        videos = self.videos()

        def one(i: int) -> ScoreReport:
            return score_video(videos[i], self.intent, self.bank, self.backends.vqa, candidate_index=i, cache=self.vqa_cache)

        try:
            reports = _fan_out(one, range(len(videos)), self.cfg.parallelism)
        finally:
            self.vqa_store.flush()
        output = {"reports": [_report_dict(r) for r in reports]}
        return output, {"latencies": {str(r.candidate_index): sum(r.latencies) for r in reports}}

    def reports(self) -> list[ScoreReport]:
        return [ScoreReport.from_dict(r) for r in self.outputs["score"]["reports"]]

    def exec_select(self) -> tuple[dict, dict]:
        selection = select_best(self.reports())
        winner_meta = self.outputs["generate"]["videos"][selection.winner_index]
        return {**selection.to_dict(), "winner_video": winner_meta["id"]}, {}

    def winner(self) -> VideoArtifact:
        index = self.outputs["select"]["winner_index"]
        return self.videos()[index]

    def exec_critique(self) -> tuple[dict, dict]:
        if self.backends.critic is None:
            raise ValidationError("critique is enabled but no critique backend is configured")
        index = self.outputs["select"]["winner_index"]
        winner_report = self.reports()[index]
        outcome = critique_iterate(
            self.winner(),
            winner_report,
            self.intent,
            self.outputs["refine"]["candidates"][index],
            self.backends.critic,
            self.backends.t2v,
            self.backends.vqa,
            self.bank,
            self.cfg.critique,
            params=GenerationParams(self.cfg.seed ^ index, self.cfg.base_frames, self.cfg.fps),
            vqa_cache=self.vqa_cache,
            seed=self.cfg.seed,
        )
        self.vqa_store.flush()
        output = {
            **outcome.to_dict(self.intent),
            "final_video_meta": outcome.video.meta(),
            "final_report": _report_dict(outcome.report),
        }
        return output, {"iterations": len(outcome.reports), "stopped": outcome.stopped}

    def pre_enhance_video(self) -> VideoArtifact:
        if self.cfg.critique.enabled:
            meta = self.outputs["critique"]["final_video_meta"]
            if meta["id"] != self.outputs["select"]["winner_video"]:
                return self._resolve_video(meta, self.run_dir / "videos" / "critique")
        return self.winner()

    def exec_enhance(self) -> tuple[dict, dict]:
        source = self.pre_enhance_video()
        final = self.backends.enhancer.enhance_video(source, self.intent, self.cfg.target_frames)
        return {"source_video": source.id, "final": final.meta()}, {}

    # --- persistence ------------------------------------------------------
    def persist(self, stage: str, output: dict) -> None:
        d = self.run_dir
        if stage == "retrieve":
            write_json(d / "retrieval.json", output)
        elif stage == "merge":
            atomic_write(d / "merged.txt", output["merged"] + "\n")
            write_json(d / "merge_steps.json", output)
        elif stage == "refine":
            write_json(d / "candidates.json", output)
        elif stage == "generate":
            for meta in output["videos"]:
                video = self._resolve_video(meta, d / "videos" / str(meta["index"]))
                self._store_video(video, d / "videos" / str(meta["index"]))
                write_json(d / "videos" / f"{meta['index']}.json", meta)
        elif stage == "score":
            for r in output["reports"]:
                write_json(d / "scores" / f"{r['candidate_index']}.json", r)
        elif stage == "select":
            write_json(d / "selection.json", output)
        elif stage == "critique":
            meta = output["final_video_meta"]
            if meta["id"] != self.outputs["select"]["winner_video"]:
                self._store_video(self._resolve_video(meta, d / "videos" / "critique"), d / "videos" / "critique")
            write_json(d / "critique.json", output)
        elif stage == "enhance":
            video = self._resolve_video(output["final"], d / "final")
            self._store_video(video, d / "final")

    def restore(self, stage: str) -> dict:
        d = self.run_dir
        if stage == "retrieve":
            return _read_json(d / "retrieval.json")
        if stage == "merge":
            if not (d / "merged.txt").exists():
                raise MissingArtifact(f"recorded intermediate is missing: {d / 'merged.txt'}")
            return _read_json(d / "merge_steps.json")
        if stage == "refine":
            return _read_json(d / "candidates.json")
        if stage == "generate":
            count = self.record.entry("generate")["detail"]["count"]
            videos = [_read_json(d / "videos" / f"{i}.json") for i in range(count)]
            for meta in videos:
                self._resolve_video(meta, d / "videos" / str(meta["index"]))
            return {"videos": videos}
        if stage == "score":
            n = len(self.outputs["generate"]["videos"])
            return {"reports": [_read_json(d / "scores" / f"{i}.json") for i in range(n)]}
        if stage == "select":
            return _read_json(d / "selection.json")
        if stage == "critique":
            return _read_json(d / "critique.json")
        if stage == "enhance":
            meta = _read_json(d / "final.json")
            self._resolve_video(meta, d / "final")
            return {"source_video": self.record.entry("enhance")["detail"]["source_video"], "final": meta}
        raise ValueError(stage)

    # --- driver -------------------------------------------------------------
    def stages(self) -> list[str]:
        return [s for s in STAGES if s != "critique" or self.cfg.critique.enabled]

    def flush_transcript(self) -> None:
        entries = self.transcript.entries[self._flushed :]
        if entries:
            with (self.run_dir / "transcript.jsonl").open("a", encoding="utf-8") as fh:
                for e in entries:
                    fh.write(canonical_json({**e, "session": self.session}) + "\n")
            self._flushed += len(entries)

    def save_record(self) -> None:
        self.record.save(self.run_dir / "record.json")

    def run(self, stop_after: str | None = None) -> RunResult:
        self.record.data["sessions"] = self.session + 1
        self.record.data["status"] = "running"
        self.record.data.pop("error", None)
        resumed_session = self.session > 0
        with self.transcript.active():
            for stage in self.stages():
                key = self.key_for(stage)
                self.keys[stage] = key
                entry = self.record.entry(stage)
                if entry is not None and entry["key"] == key:
                    output = self.restore(stage)
                    if hash_obj(output) != entry["output_hash"]:
                        raise MissingArtifact(f"recorded output of stage {stage!r} was modified")
                    self.outputs[stage] = output
                else:
                    self._execute(stage, key, resumed_session)
                if stop_after == stage:
                    self.record.data["status"] = "partial"
                    self.save_record()
                    self.flush_transcript()
                    return RunResult(None, self.record, self.run_dir, self.transcript)
        final_meta = self.outputs["enhance"]["final"]
        video = self._resolve_video(final_meta, self.run_dir / "final")
        selection = self.outputs["select"]
        self.record.data["final"] = {
            "video": final_meta,
            "path": "final.bin",
            "winner_index": selection["winner_index"],
            "tie_broken": selection["tie_broken"],
            "totals": [r["weighted_total"] for r in self.outputs["score"]["reports"]],
        }
        self.record.data["status"] = "complete"
        self.save_record()
        self.flush_transcript()
        return RunResult(video, self.record, self.run_dir, self.transcript)

    def _execute(self, stage: str, key: str, resumed: bool) -> None:
        start_index = self.transcript_offset + len(self.transcript)
        started = time.perf_counter()
        done = [s for s in STAGES if s in self.outputs]
        input_hashes = [hash_obj(self.outputs[done[-1]])] if done else []
        detail: dict = {}
        status = "cache_hit"
        output = self.cache.lookup(stage, key)
        if output is not None:
            self.outputs[stage] = output
            try:
                self.persist(stage, output)
            except MissingArtifact as exc:
                # cached output points at artifacts that are gone
                logger.warning("cache entry for %s unusable (%s); recomputing", stage, exc)
                self.outputs.pop(stage)
                output = None
        if output is None:
            status = "executed"
            try:
                output, detail = getattr(self, f"exec_{stage}")()
                self.outputs[stage] = output
                self.cache.store(stage, key, output)
                self.persist(stage, output)
            except ThreeRError as exc:
                self._fail(stage, exc)
        if stage == "generate":
            detail["count"] = len(output["videos"])
        if stage == "enhance":
            detail["source_video"] = output["source_video"]
        self.record.append(
            {
                "stage": stage,
                "step": ALGORITHM_STEP[stage],
                "key": key,
                "input_hashes": input_hashes,
                "output_hash": hash_obj(output),
                "status": status,
                "session": self.session,
                "resumed": resumed,
                "wall_time": time.perf_counter() - started,
                "transcript": [start_index, self.transcript_offset + len(self.transcript)],
                "detail": detail,
            }
        )
        self.save_record()
        self.flush_transcript()

    def _fail(self, stage: str, exc: BaseException) -> None:
        self.record.data["status"] = "failed"
        self.record.data["error"] = {"stage": stage, "message": str(exc)}
        self.save_record()
        self.flush_transcript()
        raise StageFailure(stage, exc) from exc


def _report_dict(report: ScoreReport) -> dict:
    d = report.to_dict()
    d.pop("latencies")
    return d


def default_run_id(intent: str, db_hash: str, bank_id: str, cfg: PipelineConfig, backend_ids: dict) -> str:
    return hash_obj(
        {"intent": intent, "db": db_hash, "bank": bank_id, "config": cfg.to_dict(), "backends": backend_ids}
    )[:16]


def _start(
    *,
    intent: str,
    cfg: PipelineConfig,
    backends: Backends,
    bank: QuestionBank,
    db: RelationDatabase | None,
    db_hash: str,
    db_path: str | None,
    runs_dir: Path,
    cache_dir: Path,
    run_id: str,
    config_sources: dict | None = None,
) -> _Run:
    run_dir = Path(runs_dir) / run_id
    config = {
        "intent": intent,
        "db_hash": db_hash,
        "db_path": db_path,
        "bank": bank.to_list(),
        "bank_id": bank.bank_id,
        "pipeline": cfg.to_dict(),
        "backend_ids": backends.ids(),
    }
    record_path = run_dir / "record.json"
    if record_path.exists():
        existing = _read_json(run_dir / "config.json")
        stable = {k: v for k, v in existing.items() if k != "db_path"}
        if stable != {k: v for k, v in config.items() if k != "db_path"}:
            raise ValidationError(f"run {run_id} exists with different inputs")
        record = RunRecord.load(record_path)
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_json(run_dir / "config.json", config)
        record = RunRecord.new(run_id, cfg.config_hash(), template_hashes(), bank.bank_id, backends.ids())
        if config_sources:
            record.data["config_sources"] = config_sources
        record.save(record_path)
    backends.set_retry(cfg.retry)
    return _Run(
        intent=intent,
        cfg=cfg,
        backends=backends,
        bank=bank,
        db=db,
        db_hash=db_hash,
        run_dir=run_dir,
        cache_dir=Path(cache_dir),
        record=record,
    )


def _stored_result(run_dir: Path, record: RunRecord) -> RunResult:
    meta = record.final["video"]
    path = run_dir / "final.bin"
    if not path.exists():
        raise MissingArtifact(f"final artifact missing: {path}")
    return RunResult(VideoArtifact.from_meta(meta, str(path)), record, run_dir, Transcript())


def run_pipeline(
    intent: str,
    db: RelationDatabase,
    cfg: PipelineConfig,
    backends: Backends,
    bank: QuestionBank,
    *,
    runs_dir: Path,
    cache_dir: Path,
    run_id: str | None = None,
    db_path: str | None = None,
    stop_after: str | None = None,
    config_sources: dict | None = None,
) -> RunResult:
    """Run every stage for ``intent``; a completed ``run_id`` returns its stored result."""
    if not intent.strip():
        raise ValidationError("intent must be non-empty")
    if stop_after is not None and stop_after not in STAGES:
        raise ValidationError(f"unknown stage {stop_after!r}")
    if not db.has_embeddings:
        db = db.with_embeddings(backends.embedder)
    db_hash = db.content_hash
    run_id = run_id or default_run_id(intent, db_hash, bank.bank_id, cfg, backends.ids())
    record_path = Path(runs_dir) / run_id / "record.json"
    if record_path.exists():
        record = RunRecord.load(record_path)
        if record.status == "complete":
            return _stored_result(record_path.parent, record)
    run = _start(
        intent=intent,
        cfg=cfg,
        backends=backends,
        bank=bank,
        db=db,
        db_hash=db_hash,
        db_path=db_path,
        runs_dir=runs_dir,
        cache_dir=cache_dir,
        run_id=run_id,
        config_sources=config_sources,
    )
    return run.run(stop_after)


def load_run_config(run_dir: Path) -> dict:
    if not (run_dir / "config.json").exists():
        raise UnknownRun(f"no run at {run_dir}")
    return _read_json(run_dir / "config.json")


def resume_run(
    run_id: str,
    backends: Backends,
    *,
    runs_dir: Path,
    cache_dir: Path,
    db: RelationDatabase | None = None,
) -> RunResult:
    """Continue a run from its first incomplete stage."""
    run_dir = Path(runs_dir) / run_id
    config = load_run_config(run_dir)
    record = RunRecord.load(run_dir / "record.json")
    if record.status == "complete":
        return _stored_result(run_dir, record)
    if record.data["backend_ids"] != backends.ids():
        raise ValidationError("resume needs the same backends the run started with")
    if db is None and record.entry("retrieve") is None:
        if not config.get("db_path"):
            raise ValidationError("retrieval not completed and no database path recorded; pass the database")
        db = load_database(Path(config["db_path"]).read_bytes(), backends.embedder)
    if db is not None and db.content_hash != config["db_hash"]:
        raise ValidationError("database content changed since the run started")
    entries = tuple(QuestionEntry(e["question"], e["weight"]) for e in config["bank"])
    bank = QuestionBank(entries, config["bank_id"])
    cfg = PipelineConfig.from_dict(config["pipeline"])
    run = _start(
        intent=config["intent"],
        cfg=cfg,
        backends=backends,
        bank=bank,
        db=db,
        db_hash=config["db_hash"],
        db_path=config.get("db_path"),
        runs_dir=runs_dir,
        cache_dir=cache_dir,
        run_id=run_id,
    )
    return run.run()


def summarize(result: RunResult) -> dict:
    """Machine-readable run summary; free of timings so it is byte-stable."""
    record = result.record
    final = record.final or {}
    return {
        "schema_version": 1,
        "run_id": record.run_id,
        "status": record.status,
        "winner_index": final.get("winner_index"),
        "tie_broken": final.get("tie_broken"),
        "totals": final.get("totals"),
        "final_artifact": {
            "id": final["video"]["id"],
            "frame_count": final["video"]["frame_count"],
            "path": f"{record.run_id}/{final['path']}",
        }
        if final
        else None,
        "stages": [{"stage": s, "key": k, "output_hash": h} for s, k, h in record.stage_hashes()],
    }


def run_batch(
    intent: str,
    db: RelationDatabase,
    cfg: PipelineConfig,
    backends: Backends,
    bank: QuestionBank,
    seeds: Iterable[int],
    **kwargs,
) -> dict:
    """One run per seed, plus the mean winning total across seeds."""
    runs = []
    for seed in seeds:
        result = run_pipeline(intent, db, dataclasses.replace(cfg, seed=seed), backends, bank, **kwargs)
        final = result.record.final
        runs.append(
            {
                "seed": seed,
                "run_id": result.record.run_id,
                "winner_index": final["winner_index"],
                "winner_total": final["totals"][final["winner_index"]],
                "final_id": final["video"]["id"],
            }
        )
    return {
        "schema_version": 1,
        "runs": runs,
        "mean_winner_total": statistics.fmean(r["winner_total"] for r in runs) if runs else None,
    }
