"""Result rows, the results CSV, and line charts as standalone SVG."""
from __future__ import annotations

import csv
import dataclasses
import math
import threading
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape


@dataclasses.dataclass
class ResultRow:
    run_id: str
    seed: int
    flow: str
    canary_mode: str
    m: int
    n: int
    eps_target: float
    sigma: float
    delta: float
    r: int
    W: int
    eps_lower: float
    eps_optimal: float
    auc: float
    train_acc: float
    test_acc: float
    wall_seconds: float
    status: str = "ok"


FIELDS = tuple(f.name for f in dataclasses.fields(ResultRow))
_TYPES = {f.name: f.type for f in dataclasses.fields(ResultRow)}
_CASTS = {"int": int, "float": float, "str": str}


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_row(raw: dict) -> ResultRow:
    missing = [k for k in FIELDS if k not in raw]
    if missing:
        raise ValueError(f"CSV row lacks fields {missing}")
    return ResultRow(**{k: _CASTS[_TYPES[k]](raw[k]) for k in FIELDS})


def emit_csv(rows: Iterable[ResultRow], path) -> None:
    """Write ``rows`` with the header in ResultRow field order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FIELDS)
        for row in rows:
            w.writerow([_format(getattr(row, k)) for k in FIELDS])


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="") as f:
        return [_parse_row(raw) for raw in csv.DictReader(f)]


class CsvSink:
    """Append rows to a results CSV as they arrive.

    The header is written when the file is new or empty.  A lock serializes
    writers and every row is flushed, so an interrupted sweep keeps the rows
    it already finished.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if not self.path.exists() or self.path.stat().st_size == 0:
            emit_csv([], self.path)

    def write(self, row: ResultRow) -> None:
        with self._lock, self.path.open("a", newline="") as f:
            csv.writer(f).writerow([_format(getattr(row, k)) for k in FIELDS])
            f.flush()


def _field(row, name):
    return row[name] if isinstance(row, dict) else getattr(row, name)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def emit_chart(
    rows: Sequence,
    x_field: str,
    y_field: str,
    group_field: str,
    path,
    width: int = 640,
    height: int = 420,
    title: str = "",
) -> None:
    """Line chart with one polyline per value of ``group_field``.

    Rows may be ResultRow objects or dicts.  Points with a non-finite x or y
    are dropped; repeated x values within a group are averaged.
    """
    groups: dict = defaultdict(lambda: defaultdict(list))
    for row in rows:
        x, y = float(_field(row, x_field)), float(_field(row, y_field))
        if math.isfinite(x) and math.isfinite(y):
            groups[_field(row, group_field)][x].append(y)
    series = {
        g: sorted((x, sum(ys) / len(ys)) for x, ys in pts.items()) for g, pts in groups.items()
    }

    left, right, top, bottom = 60, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [x for s in series.values() for x, _ in s] or [0.0, 1.0]
    ys = [y for s in series.values() for _, y in s] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + k * (x1 - x0) / 4
        yv = y0 + k * (y1 - y0) / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(x_field)}</text>')
    out.append(
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2})">{escape(y_field)}</text>'
    )
    if title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>')
    for i, (g, pts) in enumerate(sorted(series.items(), key=lambda kv: str(kv[0]))):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(f"{group_field}={g}")}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
