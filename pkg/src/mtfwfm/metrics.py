"""Overall, per-type and spend-weighted ROC AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import AucUndefinedError, DataError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    conv_type: int = 0


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise DataError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    auc_overall: float
    auc_per_type: dict[int, float]
    auc_weighted: float
    counts: dict[int, int]
    positives: dict[int, int]
    weights: dict[int, float]
    excluded_types: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "auc_overall": self.auc_overall,
            "auc_weighted": self.auc_weighted,
            "auc_per_type": {str(t): v for t, v in sorted(self.auc_per_type.items())},
            "counts": {str(t): v for t, v in sorted(self.counts.items())},
            "positives": {str(t): v for t, v in sorted(self.positives.items())},
            "weights": {str(t): v for t, v in sorted(self.weights.items())},
            "excluded_types": list(self.excluded_types),
        }

    def format_table(self, type_names: Sequence[str] | None = None) -> str:
        def name(t):
            return type_names[t] if type_names and t < len(type_names) else str(t)

        lines = [f"{'type':<16}{'count':>10}{'AUC':>10}"]
        for t in sorted(self.counts):
            a = self.auc_per_type.get(t)
            cell = f"{a:>10.4f}" if a is not None else f"{'n/a':>10}"
            lines.append(f"{name(t):<16}{self.counts[t]:>10d}{cell}")
        total = sum(self.counts.values())
        lines.append(f"{'overall':<16}{total:>10d}{self.auc_overall:>10.4f}")
        lines.append(f"{'weighted':<16}{total:>10d}{self.auc_weighted:>10.4f}")
        return "\n".join(lines)


def report(scores, labels, conv_types, weights: Mapping[int, float] | None = None) -> MetricsReport:
    """Per-type AUCs, pooled AUC and the weighted average sum(AUC_t N_t) / sum(N_t).

    Without ``weights`` each type is weighted by its sample count.  Types
    whose samples are all one class are left out of the weighted average
    (numerator and denominator) and listed in ``excluded_types``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    types = np.asarray(conv_types, dtype=np.int64).ravel()
    if not (scores.size == labels.size == types.size):
        raise DataError("scores, labels and types differ in length")
    per_type, counts, positives, used_w, excluded = {}, {}, {}, {}, []
    for t in np.unique(types):
        t = int(t)
        sel = types == t
        counts[t] = int(sel.sum())
        positives[t] = int((labels[sel] == 1).sum())
        try:
            per_type[t] = auc(scores[sel], labels[sel])
        except AucUndefinedError:
            excluded.append(t)
            continue
        used_w[t] = float(counts[t] if weights is None else weights.get(t, 0.0))
    if not per_type:
        raise AucUndefinedError("no conversion type has both classes")
    if any(w < 0 for w in used_w.values()):
        raise DataError("type weights must be nonnegative")
    total_w = sum(used_w.values())
    if total_w <= 0:
        raise DataError("type weights sum to zero over the evaluable types")
    weighted = sum(per_type[t] * used_w[t] for t in per_type) / total_w
    return MetricsReport(auc(scores, labels), per_type, float(weighted), counts, positives, used_w, excluded)


def report_samples(samples: Sequence[ScoredSample], weights: Mapping[int, float] | None = None) -> MetricsReport:
    return report([s.score for s in samples], [s.label for s in samples], [s.conv_type for s in samples], weights)


def load_type_weights(path, type_names: Sequence[str] = ()) -> dict[int, float]:
    """Read spend weights from JSON, keyed by type name or integer id."""
    doc = json.loads(Path(path).read_text())
    out = {}
    for key, val in doc.items():
        if key in type_names:
            out[list(type_names).index(key)] = float(val)
        else:
            try:
                out[int(key)] = float(val)
            except ValueError:
                raise DataError(f"unknown conversion type {key!r} in weights file") from None
    return out
