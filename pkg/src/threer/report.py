"""Figures and tab-separated tables for a finished or partial run.

Everything is written under ``<run_dir>/figures/``: PNG charts next to the
TSV files they were drawn from, so each figure can be regenerated or
re-plotted elsewhere from plain text.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from threer.errors import UnknownRun  # noqa: E402
from threer.orchestrator import STAGES  # noqa: E402

WINNER_COLOR = "#c0392b"
OTHER_COLOR = "#7f8c8d"


@dataclass
class RunTables:
    run_id: str
    weights: list[float]
    questions: list[str]
    totals: list[float] = field(default_factory=list)
    winner_index: int | None = None
    # contributions[c][q] = weight[q] * score of candidate c on question q
    contributions: list[list[float]] = field(default_factory=list)
    stage_times: list[tuple[str, str, float]] = field(default_factory=list)


def load_tables(run_dir: Path) -> RunTables:
    run_dir = Path(run_dir)
    if not (run_dir / "record.json").exists():
        raise UnknownRun(f"no run at {run_dir}")
    record = json.loads((run_dir / "record.json").read_text(encoding="utf-8"))
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    tables = RunTables(
        run_id=record["run_id"],
        weights=[e["weight"] for e in config["bank"]],
        questions=[e["question"] for e in config["bank"]],
    )
    score_files = sorted((run_dir / "scores").glob("*.json"), key=lambda p: int(p.stem))
    for path in score_files:
        report = json.loads(path.read_text(encoding="utf-8"))
        tables.totals.append(report["weighted_total"])
        scores = [a["score"] for a in report["answers"]]
        tables.contributions.append([w * s for w, s in zip(tables.weights, scores)])
    if (run_dir / "selection.json").exists():
        tables.winner_index = json.loads((run_dir / "selection.json").read_text(encoding="utf-8"))["winner_index"]
    order = {s: i for i, s in enumerate(STAGES)}
    for entry in sorted(record["stages"], key=lambda e: order[e["stage"]]):
        tables.stage_times.append((entry["stage"], entry["status"], float(entry.get("wall_time", 0.0))))
    return tables


def _tsv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def totals_tsv(tables: RunTables) -> str:
    rows: list[list] = [["candidate", "weighted_total", "winner"]]
    for i, total in enumerate(tables.totals):
        rows.append([i, f"{total:.10g}", int(i == tables.winner_index)])
    return _tsv(rows)


def contributions_tsv(tables: RunTables) -> str:
    rows: list[list] = [["question_id", "weight"] + [f"candidate_{i}" for i in range(len(tables.totals))]]
    for q, weight in enumerate(tables.weights):
        rows.append([q, f"{weight:.10g}"] + [f"{c[q]:.10g}" for c in tables.contributions])
    return _tsv(rows)


def stages_tsv(tables: RunTables) -> str:
    rows: list[list] = [["stage", "status", "wall_time_s"]]
    rows.extend([stage, status, f"{secs:.6f}"] for stage, status, secs in tables.stage_times)
    return _tsv(rows)


def plot_totals(tables: RunTables, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    idx = np.arange(len(tables.totals))
    colors = [WINNER_COLOR if i == tables.winner_index else OTHER_COLOR for i in idx]
    ax.bar(idx, tables.totals, color=colors)
    ax.set_xticks(idx)
    ax.set_xlabel("candidate")
    ax.set_ylabel("weighted total")
    ax.set_title(f"run {tables.run_id}: candidate totals")
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_contributions(tables: RunTables, path: Path) -> None:
    # only questions with nonzero weight can move a total
    active = [q for q, w in enumerate(tables.weights) if w != 0.0] or list(range(len(tables.weights)))
    matrix = np.array([[row[q] for q in active] for row in tables.contributions]) if tables.contributions else np.zeros((0, len(active)))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(active) + 2), 0.5 * max(len(matrix), 1) + 1.8))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(active)), [str(q) for q in active])
    ax.set_yticks(range(len(matrix)))
    ax.set_xlabel("question id")
    ax.set_ylabel("candidate")
    ax.set_title("weight x answer")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_timeline(tables: RunTables, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    start = 0.0
    for row, (stage, status, secs) in enumerate(tables.stage_times):
        color = OTHER_COLOR if status == "cache_hit" else WINNER_COLOR if status == "failed" else "#2980b9"
        ax.barh(row, secs, left=start, color=color)
        start += secs
    ax.set_yticks(range(len(tables.stage_times)), [s for s, _, _ in tables.stage_times])
    ax.invert_yaxis()
    ax.set_xlabel("seconds since run start")
    ax.set_title("stage timeline")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_dir: Path) -> list[Path]:
    """Write the PNG figures and their TSV tables; returns every path written."""
    tables = load_tables(run_dir)
    out = Path(run_dir) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (
        ("totals.tsv", totals_tsv(tables)),
        ("contributions.tsv", contributions_tsv(tables)),
        ("stages.tsv", stages_tsv(tables)),
    ):
        (out / name).write_text(text, encoding="utf-8")
        written.append(out / name)
    if tables.totals:
        plot_totals(tables, out / "totals.png")
        plot_contributions(tables, out / "contributions.png")
        written += [out / "totals.png", out / "contributions.png"]
    plot_timeline(tables, out / "timeline.png")
    written.append(out / "timeline.png")
    return written
