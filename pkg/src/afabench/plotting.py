"""Budget curves as standalone SVG: one polyline per method with std error bars."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"]


class PlotError(ValueError):
    pass


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def curves_svg(curves: dict[str, tuple[list[float], list[float]]], title: str = "",
               ylabel: str = "Accuracy", width: int = 640, height: int = 420) -> str:
    """``curves`` maps method id to (means, stds) indexed by acquisition step."""
    if not curves:
        raise PlotError("no methods to plot")
    left, right, top, bottom = 70, 150, 40, 55
    pw, ph = width - left - right, height - top - bottom
    steps = max(len(m) for m, _ in curves.values())
    lo = min(min(a - s for a, s in zip(m, sd)) for m, sd in curves.values())
    hi = max(max(a + s for a, s in zip(m, sd)) for m, sd in curves.values())
    lo, hi = max(0.0, lo - 0.02), min(1.0, hi + 0.02) if hi <= 1.0 else hi + 0.02
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05

    def sx(t):  # step t is 1-based
        return left + (0.5 if steps == 1 else (t - 1) / (steps - 1)) * pw

    def sy(v):
        return top + (1 - (v - lo) / (hi - lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" '
                   f'font-size="14">{escape(title)}</text>')
    out.append(f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" '
               'stroke="black"/>')
    out.append(f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" '
               'stroke="black"/>')
    for t in range(1, steps + 1):
        x = sx(t)
        out.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">{t}</text>')
    for v in _ticks(lo, hi):
        y = sy(v)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">'
               'Number of acquired features</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (method, (mean, std)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(t + 1):.2f},{sy(v):.2f}" for t, v in enumerate(mean))
        for t, (v, s) in enumerate(zip(mean, std)):
            if s > 0:
                x = sx(t + 1)
                out.append(f'<line class="errorbar" x1="{x:.2f}" y1="{sy(v - s):.2f}" '
                           f'x2="{x:.2f}" y2="{sy(v + s):.2f}" stroke="{color}" stroke-width="1"/>')
        out.append(f'<polyline data-method="{escape(method)}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_results(rows: list[dict], out_dir, classifier_mode: str | None = None) -> list[Path]:
    """One SVG per (dataset, budget, classifier mode) from harness CSV rows."""
    required = {"dataset", "method", "classifier_mode", "budget", "step", "mean", "std"}
    if not rows:
        raise PlotError("results table is empty")
    missing = required - set(rows[0])
    if missing:
        raise PlotError(f"results table lacks columns {sorted(missing)}")
    groups: dict[tuple, dict[str, dict[int, tuple[float, float]]]] = {}
    kinds: dict[str, str] = {}
    for r in rows:
        if classifier_mode and r["classifier_mode"] != classifier_mode:
            continue
        try:
            step, mean, std = int(r["step"]), float(r["mean"]), float(r["std"])
        except (TypeError, ValueError) as exc:
            raise PlotError(f"malformed row {r}") from exc
        key = (r["dataset"], int(r["budget"]), r["classifier_mode"])
        groups.setdefault(key, {}).setdefault(r["method"], {})[step] = (mean, std)
        kinds[r["dataset"]] = r.get("metric", "")
    if not groups:
        raise PlotError("no rows left after filtering")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (ds, b, mode), methods in sorted(groups.items()):
        curves = {m: ([v[t][0] for t in sorted(v)], [v[t][1] for t in sorted(v)])
                  for m, v in sorted(methods.items())}
        ylabel = "F1" if ds == "physionet" or kinds.get(ds) == "f1" else "Accuracy"
        svg = curves_svg(curves, f"{ds}, b = {b} ({mode} classifier)", ylabel)
        path = out_dir / f"{ds}_b{b}_{mode}.svg"
        path.write_text(svg)
        paths.append(path)
    return paths
