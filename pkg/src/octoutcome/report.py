"""Markdown/CSV result tables and self-contained SVG bar charts.

Every emitter is a pure function of its input and formats numbers with fixed
precision, so identical results always give byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import METRIC_NAMES, Aggregate, MetricSet, aggregate_runs

METRIC_LABELS = {"f1": "F1", "auroc": "AUROC", "recall": "Recall", "specificity": "Specificity"}
CSV_HEADER = "model,config,metric,mean,ci95,max,n_runs"
MAX_FOOTNOTE = ("Values in parentheses are the best single run (maximum across runs); "
                "this reading of per-model parenthesised values is an interpretation.")
SERIES_COLOURS = ("#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3")


@dataclass
class ResultRow:
    """Aggregated metrics of one model configuration."""

    model: str
    config: str
    metrics: Dict[str, Aggregate] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "config": self.config,
                "metrics": {k: {"mean": a.mean, "ci95": a.ci95, "max": a.max, "n_runs": a.n_runs}
                            for k, a in self.metrics.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ResultRow":
        try:
            metrics = {k: Aggregate(float(v["mean"]), float(v["ci95"]), float(v["max"]), int(v["n_runs"]))
                       for k, v in d["metrics"].items()}
            return cls(str(d["model"]), str(d["config"]), metrics)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed result row: {exc}") from exc


def rows_from_runs(model: str, config: str, per_run: Sequence[MetricSet]) -> ResultRow:
    return ResultRow(model, config, aggregate_runs(per_run))


def save_rows(rows: Sequence[ResultRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n"


def load_rows(text: str) -> List[ResultRow]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("results document must be a JSON list of rows")
    return [ResultRow.from_dict(d) for d in data]


def _check(rows: Sequence[ResultRow], metrics: Sequence[str]) -> None:
    if not rows:
        raise ValueError("no results to report")
    for r in rows:
        missing = [m for m in metrics if m not in r.metrics]
        if missing:
            raise ValueError(f"row {r.model!r} lacks metrics {missing}")


def _cell(a: Aggregate, bold: bool, show_max: bool) -> str:
    mean = f"{a.mean:.1f}"
    text = (f"**{mean}**" if bold else mean) + f" ± {a.ci95:.1f}"
    if show_max:
        text += f" ({a.max:.1f})"
    return text


def emit_markdown(rows: Sequence[ResultRow], metrics: Sequence[str] = ("f1", "auroc"),
                  show_max: bool = False, config_header: str = "Input",
                  title: Optional[str] = None) -> str:
    """Results table: mean ± 95% CI half-width per metric, best mean per column in bold."""
    _check(rows, metrics)
    best = {m: round(max(r.metrics[m].mean for r in rows), 1) for m in metrics}
    n_runs = sorted({a.n_runs for r in rows for a in r.metrics.values()})
    lines = []
    if title:
        lines += [f"# {title}", ""]
    header = ["Model", config_header] + [METRIC_LABELS.get(m, m) for m in metrics]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join(" --- " for _ in header) + "|")
    for r in rows:
        cells = [r.model, r.config] + [
            _cell(r.metrics[m], round(r.metrics[m].mean, 1) == best[m] and len(rows) > 1, show_max)
            for m in metrics]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    runs = ", ".join(str(n) for n in n_runs)
    lines.append(f"Mean ± 95% confidence half-width (Student t, n − 1 degrees of freedom) over n = {runs} runs; "
                 "best means in bold.")
    if show_max:
        lines.append(MAX_FOOTNOTE)
    return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return format(float(v), ".10g")


def emit_csv(rows: Sequence[ResultRow], metrics: Optional[Sequence[str]] = None) -> str:
    """One line per (row, metric): model,config,metric,mean,ci95,max,n_runs."""
    if not rows:
        raise ValueError("no results to report")
    out = [CSV_HEADER]
    for r in rows:
        for m in (metrics or [k for k in METRIC_NAMES if k in r.metrics]):
            a = r.metrics[m]
            fields = [r.model, r.config, m, _num(a.mean), _num(a.ci95), _num(a.max), str(a.n_runs)]
            out.append(",".join(f'"{f}"' if "," in f or '"' in f else f for f in fields))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- SVG charts

def _f(v: float) -> str:
    return f"{v:.2f}"


def _svg_open(width: float, height: float) -> List[str]:
    return ['<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_f(width)}" '
            f'height="{_f(height)}" viewBox="0 0 {_f(width)} {_f(height)}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>']


def _legend(names: Sequence[str], x: float, y: float) -> List[str]:
    out = []
    for i, name in enumerate(names):
        yy = y + 16 * i
        out.append(f'<rect x="{_f(x)}" y="{_f(yy - 9)}" width="10" height="10" '
                   f'fill="{SERIES_COLOURS[i % len(SERIES_COLOURS)]}"/>')
        out.append(f'<text x="{_f(x + 14)}" y="{_f(yy)}">{escape(name)}</text>')
    return out


def emit_figure(rows: Sequence[ResultRow], metrics: Sequence[str] = ("f1", "auroc"),
                y_label: str = "Score (%)") -> str:
    """Grouped vertical bars (one group per row, one bar per metric) with 95% CI whiskers."""
    _check(rows, metrics)
    top = max(100.0, max(r.metrics[m].mean + r.metrics[m].ci95 for r in rows for m in metrics))
    top = float(np.ceil(top / 10.0) * 10.0)
    bar_w, gap = 16.0, 14.0
    group_w = bar_w * len(metrics) + gap
    left, right, upper, lower = 56.0, 110.0, 20.0, 70.0
    plot_h = 260.0
    width = left + group_w * len(rows) + right
    height = upper + plot_h + lower

    def y(v: float) -> float:
        return upper + plot_h * (1.0 - min(max(v, 0.0), top) / top)

    out = _svg_open(width, height)
    for tick in np.arange(0.0, top + 1e-9, 20.0):
        yy = y(tick)
        out.append(f'<line x1="{_f(left)}" y1="{_f(yy)}" x2="{_f(width - right)}" y2="{_f(yy)}" '
                   'stroke="#dddddd" stroke-width="0.5"/>')
        out.append(f'<text x="{_f(left - 6)}" y="{_f(yy + 4)}" text-anchor="end">{tick:.0f}</text>')
    out.append(f'<line x1="{_f(left)}" y1="{_f(upper)}" x2="{_f(left)}" y2="{_f(upper + plot_h)}" stroke="#000000"/>')
    out.append(f'<line x1="{_f(left)}" y1="{_f(upper + plot_h)}" x2="{_f(width - right)}" '
               f'y2="{_f(upper + plot_h)}" stroke="#000000"/>')
    out.append(f'<text x="14" y="{_f(upper + plot_h / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_f(upper + plot_h / 2)})">{escape(y_label)}</text>')
    for gi, r in enumerate(rows):
        gx = left + gap / 2 + gi * group_w
        for mi, m in enumerate(metrics):
            a = r.metrics[m]
            x0 = gx + mi * bar_w
            colour = SERIES_COLOURS[mi % len(SERIES_COLOURS)]
            out.append(f'<rect class="bar" data-series="{escape(m)}" x="{_f(x0)}" y="{_f(y(a.mean))}" '
                       f'width="{_f(bar_w - 2)}" height="{_f(y(0.0) - y(a.mean))}" fill="{colour}"/>')
            cx = x0 + (bar_w - 2) / 2
            lo, hi = y(a.mean - a.ci95), y(a.mean + a.ci95)
            out.append(f'<g class="whisker" stroke="#000000" stroke-width="0.8">'
                       f'<line x1="{_f(cx)}" y1="{_f(lo)}" x2="{_f(cx)}" y2="{_f(hi)}"/>'
                       f'<line x1="{_f(cx - 3)}" y1="{_f(lo)}" x2="{_f(cx + 3)}" y2="{_f(lo)}"/>'
                       f'<line x1="{_f(cx - 3)}" y1="{_f(hi)}" x2="{_f(cx + 3)}" y2="{_f(hi)}"/></g>')
        lx = gx + (group_w - gap) / 2
        ly = upper + plot_h + 12
        out.append(f'<text x="{_f(lx)}" y="{_f(ly)}" text-anchor="end" '
                   f'transform="rotate(-40 {_f(lx)} {_f(ly)})">{escape(r.model)}</text>')
    out += _legend([METRIC_LABELS.get(m, m) for m in metrics], width - right + 14, upper + 10)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_importance_figure(series: Mapping[str, Mapping[str, float]]) -> str:
    """Horizontal grouped bars of feature-importance percentages.

    ``series`` maps a model name (e.g. "clinical only") to feature -> percent.
    Features absent from a series are simply not drawn for it.
    """
    if not series or not any(series.values()):
        raise ValueError("no feature importances to plot")
    features: List[str] = []
    for values in series.values():
        for name in values:
            if name not in features:
                features.append(name)
    names = list(series)
    bar_h, gap = 12.0, 10.0
    group_h = bar_h * len(names) + gap
    left, right, upper, lower = 130.0, 150.0, 16.0, 36.0
    plot_w = 320.0
    top = float(np.ceil(max(max(v.values()) for v in series.values() if v) / 10.0) * 10.0)
    top = max(top, 10.0)
    width = left + plot_w + right
    height = upper + group_h * len(features) + lower

    def x(v: float) -> float:
        return left + plot_w * min(max(v, 0.0), top) / top

    base = upper + group_h * len(features)
    out = _svg_open(width, height)
    for tick in np.arange(0.0, top + 1e-9, 10.0):
        xx = x(tick)
        out.append(f'<line x1="{_f(xx)}" y1="{_f(upper)}" x2="{_f(xx)}" y2="{_f(base)}" '
                   'stroke="#dddddd" stroke-width="0.5"/>')
        out.append(f'<text x="{_f(xx)}" y="{_f(base + 14)}" text-anchor="middle">{tick:.0f}</text>')
    out.append(f'<text x="{_f(left + plot_w / 2)}" y="{_f(base + 30)}" text-anchor="middle">'
               'Feature importance (%)</text>')
    for fi, feat in enumerate(features):
        gy = upper + gap / 2 + fi * group_h
        out.append(f'<text x="{_f(left - 6)}" y="{_f(gy + group_h / 2)}" text-anchor="end">{escape(feat)}</text>')
        for si, name in enumerate(names):
            if feat not in series[name]:
                continue
            v = float(series[name][feat])
            yy = gy + si * bar_h
            out.append(f'<rect class="bar" data-series="{escape(name)}" x="{_f(left)}" y="{_f(yy)}" '
                       f'width="{_f(x(v) - left)}" height="{_f(bar_h - 2)}" '
                       f'fill="{SERIES_COLOURS[si % len(SERIES_COLOURS)]}"/>')
            out.append(f'<text x="{_f(x(v) + 3)}" y="{_f(yy + bar_h - 3)}" font-size="9">{v:.1f}</text>')
    out.append(f'<line x1="{_f(left)}" y1="{_f(upper)}" x2="{_f(left)}" y2="{_f(base)}" stroke="#000000"/>')
    out += _legend(names, left + plot_w + 20, upper + 10)
    out.append("</svg>")
    return "\n".join(out) + "\n"


__all__ = [
    "CSV_HEADER", "MAX_FOOTNOTE", "ResultRow", "emit_csv", "emit_figure", "emit_importance_figure",
    "emit_markdown", "load_rows", "rows_from_runs", "save_rows",
]
