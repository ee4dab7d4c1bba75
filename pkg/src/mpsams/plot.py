"""Standalone SVG line charts for run logs, schedule sweeps and bench reports."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=55)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class PlotError(ValueError):
    pass


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, count))


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def line_chart(
    series: dict[str, tuple[Sequence[float], Sequence[float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
    log_y: bool = False,
) -> str:
    """Render one polyline per series; log axes plot log10 of the values."""
    if not series:
        raise PlotError("nothing to plot")
    tx = (lambda v: math.log10(v)) if log_x else float
    ty = (lambda v: math.log10(v)) if log_y else float
    pts = {}
    for name, (xs, ys) in series.items():
        keep = [(tx(x), ty(y)) for x, y in zip(xs, ys)
                if math.isfinite(x) and math.isfinite(y) and (not log_x or x > 0) and (not log_y or y > 0)]
        if keep:
            pts[name] = keep
    if not pts:
        raise PlotError("no finite points to plot")
    allx = [p[0] for v in pts.values() for p in v]
    ally = [p[1] for v in pts.values() for p in v]
    x0, x1, y0, y1 = min(allx), max(allx), min(ally), max(ally)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{sx(x0):.1f}" y1="{sy(y0):.1f}" x2="{sx(x1):.1f}" y2="{sy(y0):.1f}" stroke="black"/>',
        f'<line x1="{sx(x0):.1f}" y1="{sy(y0):.1f}" x2="{sx(x0):.1f}" y2="{sy(y1):.1f}" stroke="black"/>',
    ]
    for v in _ticks(x0, x1):
        label = _fmt(10**v) if log_x else _fmt(v)
        out.append(f'<text x="{sx(v):.1f}" y="{sy(y0) + 18:.1f}" text-anchor="middle" font-size="11">{label}</text>')
    for v in _ticks(y0, y1):
        label = _fmt(10**v) if log_y else _fmt(v)
        out.append(f'<text x="{sx(x0) - 6:.1f}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="11">{label}</text>')
    out.append(f'<text x="{sx((x0 + x1) / 2):.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>')
    cy = sy((y0 + y1) / 2)
    out.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"><title>{escape(name)}</title></polyline>')
        ly = MARGIN["top"] + 16 * i + 8
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def _num(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def plot_rows(rows: list[dict[str, str]], title: str = "") -> str:
    """Pick a chart from the CSV columns: sweep curve, bench scaling or run log."""
    cols = set(rows[0])
    if {"pretrain_epochs", "dsc_mean"} <= cols:
        xs = [_num(r["pretrain_epochs"]) for r in rows]
        ys = [_num(r["dsc_mean"]) for r in rows]
        return line_chart({"test DSC": (xs, ys)}, title or "DSC vs pretraining epochs", "pretraining epochs", "test DSC")
    if {"method", "patch_count", "wall_time_seconds"} <= cols:
        times: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
        for r in rows:
            if r.get("status", "ok") == "ok":
                times[r["method"]][_num(r["patch_count"])].append(_num(r["wall_time_seconds"]))
        series = {m: (list(t), [float(np.median(v)) for v in t.values()]) for m, t in times.items()}
        return line_chart(series, title or "clustering time vs patch count", "patch count", "seconds", log_x=True, log_y=True)
    if {"epoch", "loss"} <= cols:
        series: dict[str, tuple[list[float], list[float]]] = {}
        for r in rows:
            key = r.get("phase") or "loss"
            xs, ys = series.setdefault(key, ([], []))
            xs.append(_num(r["epoch"]))
            ys.append(_num(r["loss"]))
        return line_chart(series, title or "training loss", "epoch", "loss")
    raise PlotError(f"unrecognized CSV columns: {sorted(cols)}")


def plot_csv(csv_path: str | Path, svg_path: str | Path, title: str = "") -> Path:
    svg = plot_rows(read_csv(csv_path), title)
    out = Path(svg_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return out
