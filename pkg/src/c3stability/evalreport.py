"""Held-out evaluation: MSE, signed-error histogram and SVG figures.

Signed error is ``pred - gt`` throughout, so over-predicting instability
shows up as a positive bias.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .core import DataError, fmt_float


@dataclass(frozen=True)
class Prediction:
    window_id: str
    terrain: str
    speed: float
    gt: float
    pred: float

    @property
    def error(self) -> float:
        return self.pred - self.gt


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]
    bias: float


@dataclass
class EvalReport:
    mse: float
    per_class_mse: dict[str, float]
    histogram: Histogram
    bias: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def mse(preds: Sequence[float], gts: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=float)
    g = np.asarray(gts, dtype=float)
    if p.shape != g.shape:
        raise DataError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise DataError("mse of an empty set is undefined")
    return math.fsum(e * e for e in (p - g).tolist()) / p.size


def error_histogram(preds: Sequence[float], gts: Sequence[float], n_bins: int = 50,
                    value_range: tuple[float, float] = (-1.0, 1.0)) -> Histogram:
    """Histogram of signed errors; values outside ``value_range`` go to the end bins."""
    p = np.asarray(preds, dtype=float)
    g = np.asarray(gts, dtype=float)
    if p.shape != g.shape:
        raise DataError(f"length mismatch: {p.shape} vs {g.shape}")
    err = np.clip(p - g, value_range[0], value_range[1])
    counts, edges = np.histogram(err, bins=n_bins, range=value_range)
    bias = math.fsum((p - g).tolist()) / p.size if p.size else 0.0
    return Histogram([float(e) for e in edges], [int(c) for c in counts], bias)


def evaluate(predictions: Sequence[Prediction], n_bins: int = 50,
             value_range: tuple[float, float] = (-1.0, 1.0)) -> EvalReport:
    if not predictions:
        raise DataError("no predictions to evaluate")
    preds = [p.pred for p in predictions]
    gts = [p.gt for p in predictions]
    by_class: dict[str, list[Prediction]] = defaultdict(list)
    for p in predictions:
        by_class[f"{p.terrain}_{p.speed:g}"].append(p)
    per_class = {k: mse([p.pred for p in v], [p.gt for p in v])
                 for k, v in sorted(by_class.items())}
    hist = error_histogram(preds, gts, n_bins, value_range)
    return EvalReport(mse(preds, gts), per_class, hist, hist.bias, len(predictions))


# ---------------------------------------------------------------------------
# prediction files


PRED_HEADER = ("window_id", "terrain", "speed", "gt", "pred")


def write_predictions(predictions: Sequence[Prediction], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for p in predictions:
            w.writerow((p.window_id, p.terrain, f"{p.speed:g}", fmt_float(p.gt), fmt_float(p.pred)))
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [Prediction(r["window_id"], r["terrain"], float(r["speed"]),
                           float(r["gt"]), float(r["pred"])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed predictions file ({exc})") from exc


# ---------------------------------------------------------------------------
# SVG rendering


def _num(x: float) -> str:
    return f"{x:.2f}"


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      f'<rect width="{width}" height="{height}" fill="white"/>',
                      *body, "</svg>", ""])


def histogram_svg(hist: Histogram, width: int = 640, height: int = 360) -> str:
    left, right, top, bottom = 50, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    peak = max(hist.counts) or 1
    n = len(hist.counts)
    lo, hi = hist.edges[0], hist.edges[-1]
    body = [f'<text x="{width / 2}" y="18" text-anchor="middle">Prediction error (pred - gt)'
            f"</text>",
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    bw = pw / n
    for i, c in enumerate(hist.counts):
        if c == 0:
            continue
        h = ph * c / peak
        body.append(f'<rect x="{_num(left + i * bw)}" y="{_num(top + ph - h)}" '
                    f'width="{_num(bw)}" height="{_num(h)}" fill="steelblue"/>')
    for x in (lo, 0.5 * (lo + hi), hi):
        px = left + pw * (x - lo) / (hi - lo)
        body.append(f'<text x="{_num(px)}" y="{top + ph + 15}" text-anchor="middle">{x:g}</text>')
    body.append(f'<text x="{left - 5}" y="{top + 4}" text-anchor="end">{peak}</text>')
    body.append(f'<text x="{left - 5}" y="{top + ph}" text-anchor="end">0</text>')
    bx = left + pw * (min(max(hist.bias, lo), hi) - lo) / (hi - lo)
    body.append(f'<line x1="{_num(bx)}" y1="{top}" x2="{_num(bx)}" y2="{top + ph}" '
                f'stroke="crimson" stroke-dasharray="4 3"/>')
    body.append(f'<text x="{left + pw}" y="{top + 12}" text-anchor="end" fill="crimson">'
                f"bias {hist.bias:+.4f}</text>")
    return _svg(width, height, body, "error histogram")


def trace_svg(predictions: Sequence[Prediction], width: int = 800, height: int = 360) -> str:
    left, right, top, bottom = 50, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    n = len(predictions)

    def pt(i: int, y: float) -> str:
        x = left + (pw * i / (n - 1) if n > 1 else pw / 2)
        return f"{_num(x)},{_num(top + ph * (1 - y))}"

    gt_pts = " ".join(pt(i, p.gt) for i, p in enumerate(predictions))
    pr_pts = " ".join(pt(i, p.pred) for i, p in enumerate(predictions))
    body = [f'<text x="{width / 2}" y="18" text-anchor="middle">Stability score by window'
            f"</text>",
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
            f'<text x="{left - 5}" y="{top + 4}" text-anchor="end">1</text>',
            f'<text x="{left - 5}" y="{top + ph}" text-anchor="end">0</text>',
            f'<text x="{left + pw}" y="{top + ph + 15}" text-anchor="end">{n - 1}</text>',
            f'<polyline points="{gt_pts}" fill="none" stroke="black" stroke-width="1"/>',
            f'<polyline points="{pr_pts}" fill="none" stroke="darkorange" stroke-width="1"/>',
            f'<text x="{left + 10}" y="{top + 12}">ground truth</text>',
            f'<text x="{left + 10}" y="{top + 26}" fill="darkorange">predicted</text>']
    return _svg(width, height, body, "prediction trace")


def render_report(report: EvalReport, predictions: Sequence[Prediction],
                  out_dir: str | Path, provenance: dict | None = None) -> dict[str, Path]:
    """Write ``report.json``, ``errors.csv``, ``histogram.svg`` and ``trace.svg``."""
    if not predictions:
        raise DataError("refusing to render a report without predictions")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in
                 ("report.json", "errors.csv", "histogram.svg", "trace.svg")}
        doc = report.to_dict()
        if provenance:
            doc["provenance"] = provenance
        paths["report.json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
        with open(paths["errors.csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("window_id", "terrain", "speed", "gt", "pred", "error"))
            for p in predictions:
                w.writerow((p.window_id, p.terrain, f"{p.speed:g}", fmt_float(p.gt),
                            fmt_float(p.pred), fmt_float(p.error)))
        paths["histogram.svg"].write_text(histogram_svg(report.histogram), encoding="utf-8")
        paths["trace.svg"].write_text(trace_svg(predictions), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths
