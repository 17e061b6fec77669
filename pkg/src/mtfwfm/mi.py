"""Per-type mutual information between field pairs and the conversion label.

For type t and fields (p, q) the plug-in estimate is

    MI = sum_{i,j,l} P(i,j,l) * log(P(i,j,l) / (P(i,j) * P(l)))

with all probabilities taken over the type-t samples, natural log, and
empty cells contributing zero.  Counts are kept as sparse sorted code
arrays per (type, pair) so chunks can be merged associatively.
"""

from __future__ import annotations

import csv
import html
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ExportError, SchemaError
from .model import ModelKind, ModelParams
from .schema import InstanceSet

log = logging.getLogger(__name__)


@dataclass
class ContingencyCounts:
    """Joint (feature_i, feature_j, label) counts per conversion type and field pair.

    ``cells[t][(p, q)]`` is ``(codes, counts)`` where ``codes = i * M + j``
    (sorted, unique) and ``counts`` is an (n_cells, 2) int64 array split by
    label.  ``label_totals[t]`` holds the negatives/positives of type t.
    """

    num_fields: int
    num_features: int
    num_types: int
    label_totals: np.ndarray
    cells: list[dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]]
    overflow: set[tuple[int, int, int]] = field(default_factory=set)
    max_cells: int | None = None

    @classmethod
    def empty(cls, num_fields: int, num_features: int, num_types: int, max_cells: int | None = None):
        return cls(num_fields, num_features, num_types, np.zeros((num_types, 2), dtype=np.int64),
                   [{} for _ in range(num_types)], set(), max_cells)

    def totals(self) -> np.ndarray:
        return self.label_totals.sum(axis=1)

    def pairs(self):
        n = self.num_fields
        return [(p, q) for p in range(n) for q in range(p + 1, n)]

    def merge(self, other: "ContingencyCounts") -> "ContingencyCounts":
        """Sum two count sets (in place on ``self``; returns ``self``)."""
        if (self.num_fields, self.num_features, self.num_types) != (
                other.num_fields, other.num_features, other.num_types):
            raise SchemaError("cannot merge counts with different shapes")
        self.label_totals += other.label_totals
        self.overflow |= other.overflow
        for t in range(self.num_types):
            for pq, (codes, cnt) in other.cells[t].items():
                if (t, *pq) in self.overflow:
                    self.cells[t].pop(pq, None)
                    continue
                if pq in self.cells[t]:
                    a_codes, a_cnt = self.cells[t][pq]
                    codes, inv = np.unique(np.concatenate([a_codes, codes]), return_inverse=True)
                    summed = np.zeros((codes.size, 2), dtype=np.int64)
                    np.add.at(summed, inv, np.concatenate([a_cnt, cnt]))
                    cnt = summed
                self.cells[t][pq] = (codes, cnt)
                self._check_cap(t, pq)
        return self

    def _check_cap(self, t: int, pq: tuple[int, int]) -> None:
        if self.max_cells is not None and self.cells[t][pq][0].size > self.max_cells:
            log.warning("type %d pair %s exceeds %d cells; excluded from MI", t, pq, self.max_cells)
            self.overflow.add((t, *pq))
            del self.cells[t][pq]


def _count_chunk(X, types, labels, num_features, num_types, max_cells) -> ContingencyCounts:
    n_fields = X.shape[1]
    out = ContingencyCounts.empty(n_fields, num_features, num_types, max_cells)
    labels = labels.astype(np.int64)
    for t in np.unique(types):
        t = int(t)
        sel = types == t
        Xt, yt = X[sel], labels[sel]
        out.label_totals[t] = np.bincount(yt, minlength=2)
        for p in range(n_fields):
            for q in range(p + 1, n_fields):
                codes = Xt[:, p] * num_features + Xt[:, q]
                uniq, inv = np.unique(codes, return_inverse=True)
                cnt = np.zeros((uniq.size, 2), dtype=np.int64)
                np.add.at(cnt, (inv, yt), 1)
                out.cells[t][(p, q)] = (uniq, cnt)
                out._check_cap(t, (p, q))
    return out


def count(
    dataset: InstanceSet,
    num_features: int,
    num_types: int,
    *,
    chunk_size: int = 50_000,
    max_cells: int | None = None,
) -> ContingencyCounts:
    """Exact joint counts per type, field pair, feature combination and label."""
    if len(dataset) == 0:
        raise DataError("cannot count an empty dataset")
    dataset.check_types(num_types)
    X = dataset.X
    if X.size and X.max() >= num_features:
        raise SchemaError("feature index out of range")
    total = ContingencyCounts.empty(X.shape[1], num_features, num_types, max_cells)
    for start in range(0, len(dataset), chunk_size):
        sl = slice(start, start + chunk_size)
        total.merge(_count_chunk(X[sl], dataset.conv_type[sl], dataset.label[sl],
                                 num_features, num_types, max_cells))
    return total


@dataclass
class MiTable:
    """``values[t]`` is the symmetric N x N MI matrix of type t (zero diagonal).

    Types without samples are listed in ``absent``; pairs dropped by the
    cell cap hold NaN.
    """

    values: dict[int, np.ndarray]
    absent: list[int]
    num_fields: int

    def to_json(self) -> dict:
        return {
            "values": {str(t): m.tolist() for t, m in sorted(self.values.items())},
            "absent": self.absent,
            "num_fields": self.num_fields,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MiTable":
        return cls({int(t): np.asarray(m, dtype=np.float64) for t, m in doc["values"].items()},
                   list(doc["absent"]), int(doc["num_fields"]))


def _pair_mi(cnt: np.ndarray, label_totals: np.ndarray) -> float:
    n = label_totals.sum()
    pair_tot = cnt.sum(axis=1, keepdims=True)
    nz = cnt > 0
    c = cnt[nz].astype(np.float64)
    denom = np.broadcast_to(pair_tot, cnt.shape)[nz] * np.broadcast_to(label_totals, cnt.shape)[nz]
    return float(np.sum(c / n * np.log(c * n / denom)))


def mutual_information(counts: ContingencyCounts) -> MiTable:
    values, absent = {}, []
    N = counts.num_fields
    for t in range(counts.num_types):
        lt = counts.label_totals[t]
        if lt.sum() == 0:
            absent.append(t)
            continue
        m = np.zeros((N, N))
        for p, q in counts.pairs():
            if (t, p, q) in counts.overflow:
                m[p, q] = m[q, p] = np.nan
                continue
            _, cnt = counts.cells[t][(p, q)]
            m[p, q] = m[q, p] = _pair_mi(cnt, lt)
        values[t] = m
    return MiTable(values, absent, N)


def top_k_pairs(mi: MiTable, t: int, k: int) -> list[tuple[int, int]]:
    """k field pairs by descending MI; ties go to the lexicographically smaller pair."""
    if t not in mi.values:
        raise DataError(f"conversion type {t} has no MI values")
    m = mi.values[t]
    n = mi.num_fields
    pairs = [(p, q) for p in range(n) for q in range(p + 1, n) if not np.isnan(m[p, q])]
    pairs.sort(key=lambda pq: (-m[pq], pq))
    return pairs[:max(k, 0)]


def upper_triangle(m: np.ndarray) -> np.ndarray:
    return m[np.triu_indices(m.shape[0], 1)]


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation of the upper triangles; None when either is constant or NaN."""
    x, y = upper_triangle(a), upper_triangle(b)
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def interaction_magnitudes(params: ModelParams) -> dict[int, np.ndarray]:
    """|r^t| per conversion type of an MT-FwFM model."""
    if params.kind is not ModelKind.MT_FWFM:
        raise SchemaError("|r^t| maps need an MT-FwFM model")
    return {t: np.abs(params.interaction_weights[t]) for t in range(params.config.num_types)}


def write_matrix_csv(path: Path, m: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["", *names])
        for name, row in zip(names, m):
            w.writerow([name, *(f"{v:.6g}" for v in row)])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _color(frac: float) -> str:
    lo, hi = (255, 255, 255), (8, 48, 107)
    rgb = [round(a + (b - a) * frac) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(m: np.ndarray, names: Sequence[str], title: str = "", cell: int = 24) -> str:
    """Self-contained SVG heatmap, one <rect> per cell, linear scale over [0, max]."""
    n = m.shape[0]
    margin = 8 + 7 * max((len(s) for s in names), default=1)
    top = margin + 20
    vmax = np.nanmax(m) if np.isfinite(m).any() else 0.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{margin + n * cell + 10}" '
        f'height="{top + n * cell + 10}" font-family="sans-serif" font-size="11">',
        f'<text x="4" y="14">{html.escape(title)}</text>',
    ]
    for i, name in enumerate(names):
        y = top + i * cell + cell * 0.7
        parts.append(f'<text x="4" y="{y:.1f}">{html.escape(name)}</text>')
        x = margin + i * cell + cell * 0.7
        parts.append(f'<text x="{x:.1f}" y="{top - 4}" transform="rotate(-90 {x:.1f} {top - 4})">'
                     f'{html.escape(name)}</text>')
    for i in range(n):
        for j in range(n):
            v = m[i, j]
            frac = 0.0 if not np.isfinite(v) or vmax <= 0 else float(v / vmax)
            parts.append(
                f'<rect x="{margin + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{_color(frac)}" stroke="#cccccc"><title>{html.escape(names[i])} x '
                f'{html.escape(names[j])}: {float(v)!r}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_heatmaps(
    mi: MiTable,
    params: ModelParams | None,
    path,
    field_names: Sequence[str],
    type_names: Sequence[str] = (),
) -> dict:
    """Write MI and |r^t| matrices (CSV + SVG) per type and their correlations.

    Returns the JSON summary that is also written to ``correlations.json``.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create {out}: {exc}") from exc
    if len(field_names) != mi.num_fields:
        raise SchemaError("need one name per field")
    rmaps = interaction_magnitudes(params) if params is not None else {}
    if rmaps and params.config.num_fields != mi.num_fields:
        raise SchemaError("model and MI table have different field counts")

    def tname(t):
        return type_names[t] if t < len(type_names) else f"type{t}"

    summary = {"files": [], "pearson": {}}
    try:
        for t, m in sorted(mi.values.items()):
            name = tname(t)
            write_matrix_csv(out / f"mi_{name}.csv", m, field_names)
            (out / f"mi_{name}.svg").write_text(render_svg(m, field_names, f"MI {name}"), encoding="utf-8")
            summary["files"] += [f"mi_{name}.csv", f"mi_{name}.svg"]
            if t in rmaps:
                r = rmaps[t]
                write_matrix_csv(out / f"r_{name}.csv", r, field_names)
                (out / f"r_{name}.svg").write_text(render_svg(r, field_names, f"|r| {name}"), encoding="utf-8")
                summary["files"] += [f"r_{name}.csv", f"r_{name}.svg"]
                summary["pearson"][name] = pearson(m, r)
        (out / "correlations.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    except OSError as exc:
        raise ExportError(f"cannot write heatmaps under {out}: {exc}") from exc
    return summary
