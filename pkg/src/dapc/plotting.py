"""Static SVG output: 2-D projections of trajectories and bar charts of R^2 gains.

Everything is a pure function of the input arrays; coordinates are written
with fixed precision and nothing time-dependent is embedded, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PANEL = 300
MARGIN = 30
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


class PlotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']


def _scaler(lo: float, hi: float, out_lo: float, out_hi: float):
    span = hi - lo
    if not np.isfinite(span) or span <= 0:
        mid = 0.5 * (out_lo + out_hi)
        return lambda v: np.full_like(np.asarray(v, dtype=float), mid)
    k = (out_hi - out_lo) / span
    return lambda v: out_lo + (np.asarray(v, dtype=float) - lo) * k


def _panel(series: list[np.ndarray], dims: tuple[int, int], x0: int, labels) -> list[str]:
    stacked = np.concatenate([s[:, list(dims)] for s in series]) if series else np.zeros((0, 2))
    out = [f'<g transform="translate({x0},0)">',
           f'<rect x="{MARGIN}" y="{MARGIN}" width="{PANEL - 2 * MARGIN}" '
           f'height="{PANEL - 2 * MARGIN}" fill="none" stroke="black"/>',
           f'<text x="{PANEL // 2}" y="{PANEL - 8}" text-anchor="middle" font-size="12">'
           f'dim {dims[0]}</text>',
           f'<text x="10" y="{PANEL // 2}" font-size="12" transform="rotate(-90 10 {PANEL // 2})" '
           f'text-anchor="middle">dim {dims[1]}</text>']
    if len(stacked):
        sx = _scaler(stacked[:, 0].min(), stacked[:, 0].max(), MARGIN, PANEL - MARGIN)
        # svg y grows downwards
        sy = _scaler(stacked[:, 1].min(), stacked[:, 1].max(), PANEL - MARGIN, MARGIN)
        for i, s in enumerate(series):
            xs, ys = sx(s[:, dims[0]]), sy(s[:, dims[1]])
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
            out.append(f'<polyline fill="none" stroke="{COLORS[i % len(COLORS)]}" '
                       f'stroke-width="0.8" points="{pts}"><title>{escape(labels[i])}</title>'
                       '</polyline>')
    out.append("</g>")
    return out


def trajectory_svg(series: dict, projections=((0, 1), (0, 2))) -> str:
    """One panel per projection, every named ``(n_steps, >=2)`` trajectory overlaid.

    Each panel is scaled to the joint bounding box of all series in it.
    """
    names = list(series)
    arrays = []
    for name in names:
        a = np.asarray(series[name], dtype=float)
        if a.ndim != 2:
            raise PlotError(f"trajectory {name!r} must be 2-D, got shape {a.shape}")
        need = max(max(p) for p in projections) + 1
        if a.shape[1] < need:
            raise PlotError(f"trajectory {name!r} has {a.shape[1]} columns, projections need {need}")
        arrays.append(a)
    width = PANEL * len(projections)
    legend_h = 20 * max(1, len(names))
    lines = _header(width, PANEL + legend_h)
    for k, dims in enumerate(projections):
        lines += _panel(arrays, tuple(dims), k * PANEL, names)
    for i, name in enumerate(names):
        y = PANEL + 15 + 20 * i
        lines.append(f'<line x1="{MARGIN}" y1="{y - 4}" x2="{MARGIN + 20}" y2="{y - 4}" '
                     f'stroke="{COLORS[i % len(COLORS)]}" stroke-width="2"/>')
        lines.append(f'<text x="{MARGIN + 26}" y="{y}" font-size="12">{escape(name)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def bar_chart_svg(labels, values, title: str = "delta R^2 vs baseline") -> str:
    """Vertical bars around a zero line; an empty input still draws the axes."""
    labels = [str(v) for v in labels]
    values = np.asarray(values, dtype=float).reshape(-1)
    if len(labels) != len(values):
        raise PlotError(f"{len(labels)} labels for {len(values)} values")
    bar_w = 40
    width = max(PANEL, 2 * MARGIN + bar_w * len(values) + 10 * max(0, len(values) - 1))
    height = PANEL
    lines = _header(width, height)
    lines.append(f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="14">'
                 f'{escape(title)}</text>')
    top, bottom = MARGIN, height - MARGIN
    finite = values[np.isfinite(values)]
    lo = min(0.0, float(finite.min())) if len(finite) else 0.0
    hi = max(0.0, float(finite.max())) if len(finite) else 1.0
    if hi == lo:
        hi = lo + 1.0
    sy = _scaler(lo, hi, bottom, top)
    zero = float(sy(0.0))
    lines.append(f'<line x1="{MARGIN}" y1="{top}" x2="{MARGIN}" y2="{bottom}" stroke="black"/>')
    lines.append(f'<line x1="{MARGIN}" y1="{_fmt(zero)}" x2="{width - MARGIN}" y2="{_fmt(zero)}" '
                 'stroke="black"/>')
    for v, tick in ((lo, "lo"), (hi, "hi")):
        lines.append(f'<text x="{MARGIN - 4}" y="{_fmt(float(sy(v)) + 4)}" text-anchor="end" '
                     f'font-size="10" class="{tick}">{v:.3f}</text>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = MARGIN + 10 + i * (bar_w + 10)
        if np.isfinite(v):
            y = float(sy(v))
            lines.append(f'<rect x="{x}" y="{_fmt(min(y, zero))}" width="{bar_w - 10}" '
                         f'height="{_fmt(abs(zero - y))}" fill="{COLORS[0] if v >= 0 else COLORS[1]}">'
                         f'<title>{escape(lab)}: {v:.4f}</title></rect>')
        lines.append(f'<text x="{x + (bar_w - 10) // 2}" y="{bottom + 14}" text-anchor="middle" '
                     f'font-size="10">{escape(lab)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# CSV inputs


def read_trajectory_csv(path) -> np.ndarray:
    """Numeric CSV with a header row; errors name the offending row."""
    rows = _read_rows(path)
    if not rows:
        return np.zeros((0, 0))
    header, body = rows[0], rows[1:]
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise PlotError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        try:
            out[i - 2] = [float(v) for v in row]
        except ValueError as err:
            raise PlotError(f"{path}: row {i} is not numeric ({err})") from err
    return out


def read_delta_csv(path, value_col: str = "delta_r2", label_cols=("method", "lag")):
    """Labels and values for a bar chart from a report CSV."""
    rows = _read_rows(path)
    if not rows:
        return [], np.zeros(0)
    header = rows[0]
    if value_col not in header:
        raise PlotError(f"{path}: missing column {value_col!r}")
    vi = header.index(value_col)
    li = [header.index(c) for c in label_cols if c in header]
    labels, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise PlotError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        try:
            values.append(float(row[vi]))
        except ValueError as err:
            raise PlotError(f"{path}: row {i} is not numeric ({err})") from err
        labels.append("/".join(row[j] for j in li) or str(i - 1))
    return labels, np.asarray(values)


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row]


def write_svg(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
