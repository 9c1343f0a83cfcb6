"""Deterministic SVG plots of result tables."""
from __future__ import annotations

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402

KINDS = ("scatter2d", "line", "histogram")
_RC = {"svg.hashsalt": "nlglab", "svg.fonttype": "none", "path.simplify": False}


def read_table(source):
    """Rows (list of dicts) from CSV text, a path, or an existing list of dicts."""
    if isinstance(source, list):
        return source, (list(source[0]) if source else [])
    text = source
    if isinstance(source, os.PathLike) or "\n" not in source:
        with open(source) as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    return list(reader), list(reader.fieldnames or [])


def emit_plot(table, kind: str, path, x=None, y=None, series=None, title=None) -> str:
    """Render ``table`` as an SVG at ``path``; identical inputs give identical bytes.

    scatter2d: columns ``x``/``y`` (default x0, x1), colored by ``series`` (default condition).
    line: ``y`` against ``x`` with one line per distinct ``series`` value.
    histogram: bar chart of ``count`` over ``bin_left``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}")
    rows, columns = read_table(table)
    if kind == "scatter2d":
        x, y, series = x or "x0", y or "x1", series or "condition"
    elif kind == "histogram":
        x, y = x or "bin_left", y or "count"
    elif x is None or y is None:
        raise ConfigError("line plots need x and y columns")
    needed = [c for c in (x, y) if c] + ([series] if series and kind != "histogram" else [])
    if rows:
        missing = [c for c in needed if c not in columns]
        if missing:
            raise ConfigError(f"table lacks columns {missing}")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        if kind == "histogram":
            lefts = [float(r[x]) for r in rows]
            counts = [float(r[y]) for r in rows]
            width = lefts[1] - lefts[0] if len(lefts) > 1 else 1.0
            if rows:
                ax.bar(lefts, counts, width=width, align="edge", color="#4c72b0")
            ax.set_xlabel("edit direction length")
            ax.set_ylabel("count")
        else:
            groups = {}
            for r in rows:
                groups.setdefault(r.get(series, "") if series else "", []).append(r)
            for name in sorted(groups, key=_sort_key):
                pts = sorted(groups[name], key=lambda r: float(r[x])) if kind == "line" else groups[name]
                xs = [float(r[x]) for r in pts]
                ys = [float(r[y]) for r in pts]
                if kind == "line":
                    ax.plot(xs, ys, marker="o", label=f"{series}={name}")
                else:
                    ax.scatter(xs, ys, s=4, label=str(name))
            if groups and kind == "line":
                ax.legend(fontsize=7)
            ax.set_xlabel(x)
            ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return str(path)


def _sort_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))
