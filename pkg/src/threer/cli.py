"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 backend failure, 3 internal
error. Pipeline settings resolve as flag, then ``--config`` file, then the
built-in default; the source of every setting is stored in the run record.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from threer import __version__
from threer.cache import CachedEmbedder, JsonFileDict
from threer.clients.base import Backends, VideoArtifact
from threer.clients.http import http_backends, load_adapter_config
from threer.clients.mock import mock_backends
from threer.critique import parse_critique_trail
from threer.errors import ThreeRError, UnknownRun, ValidationError
from threer.hashing import canonical_json, sha256_hex
from threer.orchestrator import (
    STAGES,
    PipelineConfig,
    RunRecord,
    resume_run,
    run_batch,
    run_pipeline,
    summarize,
)
from threer.prompts import template_hashes
from threer.ranking import QuestionBank, VqaCache, default_bank, instantiate_question, load_question_bank, score_video
from threer.report import load_tables, totals_tsv, write_report
from threer.retrieval import load_database, retrieve

logger = logging.getLogger("threer")

JSON_SCHEMA_VERSION = 1
DEFAULT_RUNS_DIR = "runs"
DEFAULT_CACHE_DIR = ".threer-cache"

# settings that are not part of PipelineConfig but may still live in --config
INVOCATION_KEYS = ("prompt", "db", "bank", "backend", "run_id", "mock_vqa", "stop_after", "seeds")

# flag dest -> PipelineConfig path
PIPELINE_FLAGS = {
    "tau": ("tau",),
    "top_k": ("top_k",),
    "max_scenes": ("max_scenes",),
    "n_candidates": ("n_candidates",),
    "target_frames": ("target_frames",),
    "parallelism": ("parallelism",),
    "seed": ("seed",),
    "critique": ("critique", "enabled"),
    "critique_iterations": ("critique", "max_iterations"),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code instead of argparse's 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- configuration ------------------------------------------------------------


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("config file must hold a JSON object")
    return data


def resolve_settings(args: argparse.Namespace) -> tuple[PipelineConfig, dict, dict]:
    """Merge defaults, the config file and flags.

    Returns the pipeline config, the invocation settings (prompt, db, ...)
    and a map from every setting name to ``"flag"``, ``"file"`` or ``"default"``.
    """
    file_data = _read_config_file(getattr(args, "config", None))
    invocation = {k: file_data.pop(k) for k in INVOCATION_KEYS if k in file_data}
    merged = PipelineConfig().to_dict()
    sources: dict[str, str] = {}

    def leaves(d: dict, prefix: str = "") -> dict[str, Any]:
        out = {}
        for k, v in d.items():
            if isinstance(v, dict):
                out.update(leaves(v, f"{prefix}{k}."))
            else:
                out[f"{prefix}{k}"] = v
        return out

    for name in leaves(merged):
        sources[name] = "default"
    for k, v in file_data.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = {**merged[k], **v}
            for sub in leaves(v, f"{k}."):
                sources[sub] = "file"
        else:
            merged[k] = v
            sources[k] = "file"
    for dest, path in PIPELINE_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        target = merged
        for part in path[:-1]:
            target = target[part]
        target[path[-1]] = value
        sources[".".join(path)] = "flag"
    cfg = PipelineConfig.from_dict(merged)

    for key in INVOCATION_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            invocation[key] = flag_value
            sources[key] = "flag"
        elif key in invocation:
            sources[key] = "file"
    invocation.setdefault("backend", "mock")
    invocation.setdefault("mock_vqa", "hash")
    return cfg, invocation, sources


def runs_dir(args: argparse.Namespace) -> Path:
    return Path(args.runs_dir or os.environ.get("THREER_RUNS_DIR") or DEFAULT_RUNS_DIR)


def cache_dir(args: argparse.Namespace) -> Path:
    return Path(args.cache_dir or os.environ.get("THREER_CACHE_DIR") or DEFAULT_CACHE_DIR)


def make_backends(backend: str, cache: Path, *, mock_vqa: str = "hash") -> tuple[Backends, JsonFileDict]:
    """Build backends from ``mock`` or ``http:<adapter config path>``.

    The embedder is wrapped in a persistent cache; flush the returned store
    when done.
    """
    if backend == "mock":
        backends = mock_backends(cache, vqa_mode=mock_vqa)
    elif backend.startswith("http:"):
        backends = http_backends(load_adapter_config(Path(backend[len("http:") :])), cache)
    else:
        raise ValidationError(f"unknown backend {backend!r}; use 'mock' or 'http:<config>'")
    store = JsonFileDict(cache / "embeddings.json")
    backends.embedder = CachedEmbedder(backends.embedder, store)
    return backends, store


def _load_bank(path: str | None) -> QuestionBank:
    if not path:
        return default_bank()
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read bank {path}: {exc}") from None
    return load_question_bank(data)


def _read_db_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read database {path}: {exc}") from None


def _parse_seeds(value: str | list) -> list[int]:
    items = value.split(",") if isinstance(value, str) else value
    try:
        return [int(s) for s in items if str(s).strip()]
    except ValueError:
        raise ValidationError(f"seeds must be integers, got {value!r}") from None


def _emit_json(obj: dict) -> None:
    sys.stdout.write(canonical_json({"schema_version": JSON_SCHEMA_VERSION, **obj}) + "\n")


# --- commands -----------------------------------------------------------------


def _print_result(result, as_json: bool, runs: Path) -> None:
    summary = summarize(result)
    if as_json:
        _emit_json(summary)
        return
    print(f"run_id\t{summary['run_id']}")
    print(f"status\t{summary['status']}")
    if summary["final_artifact"] is None:
        return
    totals = "\t".join(f"{t:.10g}" for t in summary["totals"])
    print(f"winner_index\t{summary['winner_index']}" + ("\t(tie broken by index)" if summary["tie_broken"] else ""))
    print(f"weighted_totals\t{totals}")
    print(f"final_artifact\t{runs / summary['final_artifact']['path']}")
    print(f"frame_count\t{summary['final_artifact']['frame_count']}")


def cmd_run(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg, inv, sources = resolve_settings(args)
    for required in ("prompt", "db"):
        if not inv.get(required):
            parser.error(f"--{required} is required (flag or config file)")
    cache = cache_dir(args)
    backends, embed_store = make_backends(inv["backend"], cache, mock_vqa=inv["mock_vqa"])
    db = load_database(_read_db_bytes(inv["db"]), backends.embedder)
    embed_store.flush()
    bank = _load_bank(inv.get("bank"))
    common = dict(runs_dir=runs_dir(args), cache_dir=cache, db_path=str(Path(inv["db"]).resolve()))
    try:
        if inv.get("seeds"):
            seeds = _parse_seeds(inv["seeds"])
            summary = run_batch(inv["prompt"], db, cfg, backends, bank, seeds, config_sources=sources, **common)
            if args.json:
                _emit_json(summary)
            else:
                for r in summary["runs"]:
                    print(f"seed {r['seed']}\trun_id {r['run_id']}\twinner {r['winner_index']}\ttotal {r['winner_total']:.10g}")
                print(f"mean_winner_total\t{summary['mean_winner_total']:.10g}")
            return 0
        result = run_pipeline(
            inv["prompt"],
            db,
            cfg,
            backends,
            bank,
            run_id=inv.get("run_id"),
            stop_after=inv.get("stop_after"),
            config_sources=sources,
            **common,
        )
    finally:
        embed_store.flush()
    _print_result(result, args.json, runs_dir(args))
    return 0


def cmd_resume(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    runs = runs_dir(args)
    record_path = runs / args.run_id / "record.json"
    if not record_path.exists():
        raise UnknownRun(f"unknown run {args.run_id!r} under {runs}")
    cache = cache_dir(args)
    backends, embed_store = make_backends(args.backend or "mock", cache, mock_vqa=args.mock_vqa or "hash")
    try:
        result = resume_run(args.run_id, backends, runs_dir=runs, cache_dir=cache)
    finally:
        embed_store.flush()
    _print_result(result, args.json, runs)
    return 0


def cmd_retrieve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg, inv, _ = resolve_settings(args)
    for required in ("prompt", "db"):
        if not inv.get(required):
            parser.error(f"--{required} is required (flag or config file)")
    backends, embed_store = make_backends(inv["backend"], cache_dir(args))
    try:
        db = load_database(_read_db_bytes(inv["db"]), backends.embedder)
        ctx = retrieve(inv["prompt"], db, cfg.retrieval, backends.embedder)
    finally:
        embed_store.flush()
    if args.json:
        _emit_json(ctx.to_dict())
        return 0
    print("rank\tscene\tsimilarity\tscene_text")
    for rank, match in enumerate(ctx.matches, start=1):
        print(f"{rank}\t{match.scene_index}\t{match.similarity:.6f}\t{match.scene_text}")
        for m in match.selected_modifiers:
            print(f"\t\t{m.category}\t{m.text}")
    if not ctx.matches:
        print(f"(no scene above tau={cfg.tau})", file=sys.stderr)
    return 0


def _load_video(path: str) -> VideoArtifact:
    bin_path = Path(path)
    meta_path = bin_path.with_suffix(".json")
    if not bin_path.exists():
        raise ValidationError(f"no video at {bin_path}")
    if not meta_path.exists():
        raise ValidationError(f"video metadata {meta_path} is missing")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    video = VideoArtifact.from_meta(meta, str(bin_path))
    if sha256_hex(bin_path.read_bytes()) != video.id:
        raise ValidationError(f"{bin_path} does not match the id in its metadata")
    return video


def cmd_score(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    video = _load_video(args.video)
    bank = _load_bank(args.bank)
    cache = cache_dir(args)
    backends, _ = make_backends(args.backend or "mock", cache, mock_vqa=args.mock_vqa or "hash")
    store = JsonFileDict(cache / "vqa.json")
    vqa_cache = VqaCache(store)
    report = score_video(video, args.prompt, bank, backends.vqa, cache=vqa_cache)
    store.flush()
    print(f"vqa cache hits: {vqa_cache.hits}/{len(bank.entries)}", file=sys.stderr)
    if args.json:
        d = report.to_dict()
        d.pop("latencies")
        _emit_json(d)
        return 0
    print("question_id\tweight\tscore\tcontribution\tquestion")
    for entry, answer in zip(bank.entries, report.answers):
        question = instantiate_question(entry.question, args.prompt)
        contribution = entry.weight * answer.score
        print(f"{answer.question_id}\t{entry.weight:.10g}\t{answer.score:.10g}\t{contribution:.10g}\t{question}")
    print(f"weighted_total\t{report.weighted_total:.10g}")
    return 0


def _critique_lines(run_dir: Path) -> list[str]:
    path = run_dir / "critique.json"
    if not path.exists():
        return []
    data = json.loads(path.read_text(encoding="utf-8"))
    trail = data["trail"]
    lines = [f"critique trail (stopped: {data.get('stopped') or 'max iterations'})"]
    upi, steps = parse_critique_trail(json.dumps(trail))
    for k, (dpo, report) in enumerate(steps, start=1):
        extra = trail[f"Iterations_{k}"]
        kept = "kept" if extra.get("kept") else "discarded"
        total = extra.get("regenerated_total")
        tail = f"\tregenerated total {total:.10g} ({kept})" if total is not None else ""
        lines.append(f"Iterations_{k}\t{report.metric}\tscore {report.score}{tail}")
        lines.append(f"\tprompt_new: {report.p_new}")
    return lines


def cmd_inspect(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    run_dir = runs_dir(args) / args.run_id
    if not (run_dir / "record.json").exists():
        raise UnknownRun(f"unknown run {args.run_id!r} under {runs_dir(args)}")
    record = RunRecord.load(run_dir / "record.json")
    if args.json:
        critique = run_dir / "critique.json"
        trail = json.loads(critique.read_text(encoding="utf-8"))["trail"] if critique.exists() else None
        _emit_json({"record": record.data, "critique_trail": trail})
        return 0
    print(f"run {record.run_id}\tstatus {record.status}\tsessions {record.data.get('sessions', 0)}")
    print("step\tstage\tstatus\tresumed\twall_s\tkey\toutput_hash")
    order = {s: i for i, s in enumerate(STAGES)}
    for e in sorted(record.stages, key=lambda e: order[e["stage"]]):
        resumed = "resumed" if e.get("resumed") else "-"
        print(
            f"{e['step']}\t{e['stage']}\t{e['status']}\t{resumed}\t{e.get('wall_time', 0.0):.3f}\t"
            f"{e['key'][:12]}\t{e['output_hash'][:12]}"
        )
    if record.data.get("error"):
        print(f"error in {record.data['error']['stage']}: {record.data['error']['message']}")
    final = record.final
    if final:
        for i, total in enumerate(final["totals"]):
            mark = "\twinner" if i == final["winner_index"] else ""
            print(f"candidate {i}\t{total:.10g}{mark}")
        print(f"final\t{final['video']['id'][:12]}\t{final['video']['frame_count']} frames")
    for line in _critique_lines(run_dir):
        print(line)
    return 0


def cmd_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    run_dir = runs_dir(args) / args.run_id
    written = write_report(run_dir)
    sys.stdout.write(totals_tsv(load_tables(run_dir)))
    for path in written:
        print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_validate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if not (args.db or args.bank or args.templates or args.config):
        parser.error("nothing to validate; pass --db, --bank, --config or --templates")
    if args.db:
        db = load_database(_read_db_bytes(args.db))
        modifiers = sum(len(e.modifiers) for e in db.entries)
        print(f"db ok\t{len(db)} scenes\t{modifiers} modifiers\t{db.content_hash[:12]}")
    if args.bank:
        bank = _load_bank(args.bank)
        print(f"bank ok\t{len(bank.entries)} questions\t{bank.bank_id[:12]}")
    if args.config:
        cfg, _, _ = resolve_settings(argparse.Namespace(config=args.config))
        print(f"config ok\t{cfg.config_hash()[:12]}")
    if args.templates:
        for name, digest in sorted(template_hashes().items()):
            print(f"template ok\t{name}\t{digest[:12]}")
    return 0


# --- parser -------------------------------------------------------------------


def _dirs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs-dir", help="run directory root (env THREER_RUNS_DIR, default ./runs)")
    p.add_argument("--cache-dir", help="cache root (env THREER_CACHE_DIR, default ./.threer-cache)")


def _backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="'mock' (default) or 'http:<adapter config json>'")
    p.add_argument("--mock-vqa", choices=("hash", "yes", "no"), help="answer policy of the mock VQA model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threer", description="Retrieve, refine and rank text-to-video prompts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the whole pipeline")
    run.add_argument("--prompt", help="user intent")
    run.add_argument("--db", help="relation database (JSON Lines)")
    run.add_argument("--bank", help="question bank JSON (default: packaged bank)")
    run.add_argument("--config", help="JSON file mirroring the pipeline config")
    run.add_argument("--run-id")
    run.add_argument("--stop-after", choices=STAGES, help="stop after this stage; finish later with resume")
    run.add_argument("--seeds", help="comma-separated seeds; runs once per seed and reports the mean")
    run.add_argument("--tau", type=float)
    run.add_argument("--top-k", type=int)
    run.add_argument("--max-scenes", type=int)
    run.add_argument("--n-candidates", type=int)
    run.add_argument("--target-frames", type=int)
    run.add_argument("--parallelism", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--critique", action="store_const", const=True, help="enable the critique loop")
    run.add_argument("--critique-iterations", type=int)
    run.add_argument("--json", action="store_true", help="emit the machine-readable summary")
    _backend(run)
    _dirs(run)
    run.set_defaults(func=cmd_run)

    res = sub.add_parser("resume", help="continue an interrupted run")
    res.add_argument("run_id")
    res.add_argument("--json", action="store_true")
    _backend(res)
    _dirs(res)
    res.set_defaults(func=cmd_resume)

    ret = sub.add_parser("retrieve", help="run retrieval only")
    ret.add_argument("--prompt")
    ret.add_argument("--db")
    ret.add_argument("--config")
    ret.add_argument("--tau", type=float)
    ret.add_argument("--top-k", type=int)
    ret.add_argument("--max-scenes", type=int)
    ret.add_argument("--json", action="store_true")
    _backend(ret)
    _dirs(ret)
    ret.set_defaults(func=cmd_retrieve)

    score = sub.add_parser("score", help="score one video against the question bank")
    score.add_argument("--video", required=True, help="video .bin with a sibling .json metadata file")
    score.add_argument("--prompt", required=True)
    score.add_argument("--bank")
    score.add_argument("--json", action="store_true")
    _backend(score)
    _dirs(score)
    score.set_defaults(func=cmd_score)

    ins = sub.add_parser("inspect", help="show a run's stages, hashes, totals and critique trail")
    ins.add_argument("run_id")
    ins.add_argument("--json", action="store_true")
    _dirs(ins)
    ins.set_defaults(func=cmd_inspect)

    rep = sub.add_parser("report", help="write PNG figures and TSV tables for a run")
    rep.add_argument("run_id")
    _dirs(rep)
    rep.set_defaults(func=cmd_report)

    val = sub.add_parser("validate", help="check a database, bank, config or the packaged templates")
    val.add_argument("--db")
    val.add_argument("--bank")
    val.add_argument("--config")
    val.add_argument("--templates", action="store_true")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args, parser)
    except ThreeRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception("internal error")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
