"""Report output: delimited tables plus rendered figures.

Every reporting command writes a small CSV (the machine-readable result)
and, next to it, a PNG rendering of the same numbers for quick inspection.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import EvalReport, SweepRow

_STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def write_eval_csv(path: str | Path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["system", "precision_at_10", "users_evaluated"])
        for r in reports:
            writer.writerow([r.system, f"{r.precision_at_10:.6f}", r.users_evaluated])


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow], x_name: str) -> None:
    """Plot-ready two-column CSV; reference rows repeat the x of a full run."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([x_name, "precision_at_10"])
        for r in rows:
            writer.writerow([r.x, f"{r.precision_at_10:.6f}"])


def render_eval_figure(path: str | Path, reports: Sequence[EvalReport]) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        names = [r.system for r in reports]
        scores = [r.precision_at_10 for r in reports]
        ax.bar(names, scores, color="#3566a5", width=0.6)
        for x, s in enumerate(scores):
            ax.annotate(f"{s:.3f}", (x, s), ha="center", va="bottom", fontsize=9)
        ax.set_ylabel("precision@10")
        ax.set_title("Offline evaluation")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def render_batch_sweep_figure(path: str | Path, rows: Sequence[SweepRow]) -> None:
    """Precision against batch size (log x), reference run as a dashed line."""
    swept = [r for r in rows if not r.reference]
    refs = [r for r in rows if r.reference]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        if swept:
            ax.plot(
                [r.x for r in swept],
                [r.precision_at_10 for r in swept],
                marker="o",
                color="#3566a5",
                label="incremental",
            )
            ax.set_xscale("log")
        if refs:
            ref = sum(r.precision_at_10 for r in refs) / len(refs)
            ax.axhline(ref, linestyle="--", color="#a53535", label="single-shot reference")
        ax.set_xlabel("batch size (significant actions)")
        ax.set_ylabel("precision@10")
        ax.set_title("Precision at 10 by batch size")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def render_parallel_sweep_figure(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(
            [r.x for r in rows],
            [r.precision_at_10 for r in rows],
            marker="o",
            color="#3566a5",
        )
        ax.set_xlabel("batches processed in parallel")
        ax.set_ylabel("precision@10")
        ax.set_xticks([r.x for r in rows])
        ax.set_title("Precision at 10 by parallelism")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def mean_rows(per_seed: Sequence[Sequence[SweepRow]]) -> list[SweepRow]:
    """Average rows positionally across seeds (datasets may differ in size,
    so x values are averaged too)."""
    if not per_seed:
        return []
    length = len(per_seed[0])
    if any(len(rows) != length for rows in per_seed):
        raise ValueError("sweeps disagree on row count across seeds")
    out = []
    for j in range(length):
        rs = [rows[j] for rows in per_seed]
        out.append(
            SweepRow(
                x=round(sum(r.x for r in rs) / len(rs)),
                precision_at_10=sum(r.precision_at_10 for r in rs) / len(rs),
                users_evaluated=round(sum(r.users_evaluated for r in rs) / len(rs)),
                reference=rs[0].reference,
            )
        )
    return out
