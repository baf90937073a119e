"""Markdown summary of a results directory."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .harness import aggregate, load_cells

MISSING = "—"


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def terminal_table(cells: list[dict]) -> str:
    """Terminal-step metric per method (rows) and dataset/budget/mode (columns)."""
    curves = aggregate(cells)
    cols = sorted({(ds, b, mode) for ds, _, mode, b in curves})
    methods = sorted({m for _, m, _, _ in curves})
    head = ["method"] + [f"{ds} b={b} ({mode})" for ds, b, mode in cols]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for m in methods:
        row = [m]
        for ds, b, mode in cols:
            c = curves.get((ds, m, mode, b))
            row.append(_fmt(c.mean[-1], c.std[-1]) if c is not None else MISSING)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def timing_table(cells: list[dict]) -> str:
    """Train and evaluation seconds per method, mean ± std over cells."""
    train, evals = defaultdict(list), defaultdict(list)
    for c in cells:
        train[c["method"]].append(c["train_seconds"])
        evals[c["method"]].append(c["eval_seconds"])
    lines = ["| method | train s | eval s | cells |", "|---|---|---|---|"]
    for m in sorted(train):
        t, e = np.array(train[m]), np.array(evals[m])
        ts = t.std(ddof=1) if len(t) > 1 else 0.0
        es = e.std(ddof=1) if len(e) > 1 else 0.0
        lines.append(f"| {m} | {t.mean():.1f} ± {ts:.1f} | {e.mean():.1f} ± {es:.1f} | {len(t)} |")
    return "\n".join(lines)


def build_report(workdir) -> str:
    cells = load_cells(workdir)
    if not cells:
        raise FileNotFoundError(f"no result cells under {Path(workdir) / 'cells'}")
    return ("# Results\n\n## Terminal-step metric (mean ± std over seeds × splits)\n\n"
            + terminal_table(cells)
            + "\n\n## Compute time\n\n" + timing_table(cells) + "\n")
