"""Deterministic SVG line and box plots from CSV files.

No timestamps, no random ids: the same input always gives the same bytes.
"""

from __future__ import annotations

import csv
import math
import os
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class PlotError(ValueError):
    pass


def _read(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise PlotError(f"{path}: no header")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise PlotError(f"{path}: empty trace")
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise PlotError(f"{path}: row {i + 2} has {len(r)} fields, header has {len(header)}")
    return header, body


def _num(s, where):
    if s == "":
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise PlotError(f"non-numeric value {s!r} in {where}") from None


def _f(v):
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi):
        if not xhi > xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if not yhi > ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        pad = 0.05 * (yhi - ylo)
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo - pad, yhi + pad
        left, right, top, bottom = MARGIN
        self.px0, self.px1 = left, W - right
        self.py0, self.py1 = H - bottom, top

    def x(self, v):
        return self.px0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.px1 - self.px0)

    def y(self, v):
        return self.py0 + (v - self.ylo) / (self.yhi - self.ylo) * (self.py1 - self.py0)

    def axes(self, xlabel, ylabel, xticks=True):
        out = [
            f'<rect x="{self.px0}" y="{self.py1}" width="{self.px1 - self.px0}" height="{self.py0 - self.py1}" '
            'fill="none" stroke="#000"/>'
        ]
        for t in np.linspace(self.ylo, self.yhi, 5):
            out.append(
                f'<text x="{self.px0 - 6}" y="{_f(self.y(t) + 4)}" font-size="11" text-anchor="end">{t:.4g}</text>'
            )
        if xticks:
            for t in np.linspace(self.xlo, self.xhi, 5):
                out.append(
                    f'<text x="{_f(self.x(t))}" y="{self.py0 + 16}" font-size="11" text-anchor="middle">{t:.4g}</text>'
                )
        out.append(f'<text x="{(self.px0 + self.px1) / 2}" y="{H - 10}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(
            f'<text x="14" y="{(self.py0 + self.py1) / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 14 {(self.py0 + self.py1) / 2})">{escape(ylabel)}</text>'
        )
        return out


def _svg(parts, title):
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
        f'<rect width="{W}" height="{H}" fill="#fff"/>\n'
    )
    if title:
        head += f'<text x="{W / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>\n'
    return head + "\n".join(parts) + "\n</svg>\n"


def line_svg(header, body, spec):
    xcol = spec.get("x", header[0])
    if xcol not in header:
        raise PlotError(f"no column {xcol!r}")
    ycols = spec.get("y") or [h for h in header if h != xcol]
    if isinstance(ycols, str):
        ycols = [ycols]
    for c in ycols:
        if c not in header:
            raise PlotError(f"no column {c!r}")
    xi = header.index(xcol)
    xs = np.array([_num(r[xi], xcol) for r in body])
    ys = {c: np.array([_num(r[header.index(c)], c) for r in body]) for c in ycols}
    allv = np.concatenate([v[np.isfinite(v)] for v in ys.values()] + [np.array([spec["reference"]]) if "reference" in spec else np.empty(0)])
    if allv.size == 0:
        raise PlotError("nothing finite to plot")
    fr = _Frame(float(np.nanmin(xs)), float(np.nanmax(xs)), float(allv.min()), float(allv.max()))
    parts = fr.axes(xcol, spec.get("ylabel", ycols[0] if len(ycols) == 1 else "value"))
    for j, c in enumerate(ycols):
        ok = np.isfinite(ys[c]) & np.isfinite(xs)
        pts = " ".join(f"{_f(fr.x(a))},{_f(fr.y(b))}" for a, b in zip(xs[ok], ys[c][ok]))
        col = COLOURS[j % len(COLOURS)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.2" points="{pts}"/>')
        parts.append(
            f'<text x="{fr.px1 - 8}" y="{fr.py1 + 14 * (j + 1)}" font-size="11" text-anchor="end" fill="{col}">{escape(c)}</text>'
        )
    if "reference" in spec:
        yr = _f(fr.y(float(spec["reference"])))
        parts.append(f'<line x1="{fr.px0}" y1="{yr}" x2="{fr.px1}" y2="{yr}" stroke="#555" stroke-dasharray="4 3"/>')
    return _svg(parts, spec.get("title", ""))


def box_svg(header, body, spec):
    gcol, ycol = spec.get("group", "estimator"), spec.get("y", "kl_marginal")
    for c in (gcol, ycol):
        if c not in header:
            raise PlotError(f"no column {c!r}")
    gi, yi = header.index(gcol), header.index(ycol)
    groups: dict = {}
    for r in body:
        v = _num(r[yi], ycol)
        if np.isfinite(v):
            groups.setdefault(r[gi], []).append(v)
    if not groups:
        raise PlotError("nothing finite to plot")
    names = list(groups)
    allv = np.concatenate([np.asarray(v) for v in groups.values()])
    fr = _Frame(0.0, float(len(names)), float(allv.min()), float(allv.max()))
    parts = fr.axes(gcol, ycol, xticks=False)
    for j, g in enumerate(names):
        v = np.asarray(groups[g])
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        lo = v[v >= q1 - 1.5 * iqr].min()
        hi = v[v <= q3 + 1.5 * iqr].max()
        cx = fr.x(j + 0.5)
        half = 0.3 * (fr.x(1) - fr.x(0))
        col = COLOURS[j % len(COLOURS)]
        parts.append(
            f'<rect x="{_f(cx - half)}" y="{_f(fr.y(q3))}" width="{_f(2 * half)}" height="{_f(fr.y(q1) - fr.y(q3))}" '
            f'fill="none" stroke="{col}"/>'
        )
        parts.append(f'<line x1="{_f(cx - half)}" y1="{_f(fr.y(med))}" x2="{_f(cx + half)}" y2="{_f(fr.y(med))}" stroke="{col}" stroke-width="2"/>')
        parts.append(f'<line x1="{_f(cx)}" y1="{_f(fr.y(q3))}" x2="{_f(cx)}" y2="{_f(fr.y(hi))}" stroke="{col}"/>')
        parts.append(f'<line x1="{_f(cx)}" y1="{_f(fr.y(q1))}" x2="{_f(cx)}" y2="{_f(fr.y(lo))}" stroke="{col}"/>')
        for o in v[(v < lo) | (v > hi)]:
            parts.append(f'<circle cx="{_f(cx)}" cy="{_f(fr.y(o))}" r="2" fill="none" stroke="{col}"/>')
        parts.append(f'<text x="{_f(cx)}" y="{fr.py0 + 16}" font-size="11" text-anchor="middle">{escape(g)}</text>')
    return _svg(parts, spec.get("title", ""))


def emit_plot(csv_path, spec, out_path):
    """Render ``csv_path`` to ``out_path``.

    ``spec["type"]`` is ``"line"`` (columns ``x`` and ``y``, optional
    horizontal ``reference``) or ``"box"`` (values ``y`` grouped by
    ``group``).  Nothing is written when the input is empty or malformed.
    """
    header, body = _read(csv_path)
    kind = spec.get("type", "line")
    if kind == "line":
        svg = line_svg(header, body, spec)
    elif kind == "box":
        svg = box_svg(header, body, spec)
    else:
        raise PlotError(f"unknown plot type {kind!r}")
    tmp = out_path + ".tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(svg)
    os.replace(tmp, out_path)
    return out_path
