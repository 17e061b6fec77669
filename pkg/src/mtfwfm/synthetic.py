"""Synthetic impression/conversion logs with planted per-type field interactions.

Field values are drawn independently and uniformly.  The conversion
probability of an impression of type t is

    sigmoid(logit(base_rate_t) + sum over t's planted pairs of effect * z[a, b]
            + optional per-field main effects)

where ``z`` is a fixed standard-normal table over the pair's value grid.
Converting impressions emit one conversion after a delay drawn uniformly
from ``[0, window]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logit

from .data import DAY, ConversionRecord, ImpressionRecord, write_ndjson
from .errors import SyntheticConfigError


@dataclass
class PlantedPair:
    conv_type: str
    fields: tuple[str, str]
    effect: float


@dataclass
class GenConfig:
    type_names: list[str]
    fields: list[str]
    cardinalities: list[int]
    planted: list[PlantedPair] = field(default_factory=list)
    base_rates: list[float] | None = None
    type_share: list[float] | None = None
    impressions_per_day: int = 10_000
    days: int = 9
    lines_per_type: int = 4
    num_users: int = 1_000_000
    window_days: int = 6
    main_effect: float = 0.0
    seed: int = 0
    start_ts: int = 0

    def __post_init__(self):
        self.planted = [p if isinstance(p, PlantedPair) else PlantedPair(p["conv_type"], tuple(p["fields"]), p["effect"])
                        for p in self.planted]
        T = len(self.type_names)
        if T < 1 or len(set(self.type_names)) != T:
            raise SyntheticConfigError("need at least one uniquely named conversion type")
        if len(self.fields) != len(self.cardinalities) or len(self.fields) < 2:
            raise SyntheticConfigError("need >= 2 fields with one cardinality each")
        if min(self.cardinalities) < 1:
            raise SyntheticConfigError("cardinalities must be positive")
        if self.base_rates is None:
            self.base_rates = [0.1] * T
        if self.type_share is None:
            self.type_share = [1.0 / T] * T
        if len(self.base_rates) != T or len(self.type_share) != T:
            raise SyntheticConfigError("base_rates and type_share need one entry per type")
        if not all(0 < b < 1 for b in self.base_rates):
            raise SyntheticConfigError("base rates must lie strictly inside (0, 1)")
        share = np.asarray(self.type_share, dtype=np.float64)
        if (share < 0).any() or share.sum() <= 0:
            raise SyntheticConfigError("type_share must be nonnegative with positive sum")
        for p in self.planted:
            if p.conv_type not in self.type_names:
                raise SyntheticConfigError(f"planted pair for unknown type {p.conv_type!r}")
            a, b = p.fields
            if a not in self.fields or b not in self.fields or a == b:
                raise SyntheticConfigError(f"planted pair {p.fields} must name two distinct fields")
            if not np.isfinite(p.effect):
                raise SyntheticConfigError("effect sizes must be finite")
        if self.impressions_per_day < 1 or self.days < 1 or self.lines_per_type < 1 or self.num_users < 1:
            raise SyntheticConfigError("sizes must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["planted"] = [{"conv_type": p.conv_type, "fields": list(p.fields), "effect": p.effect} for p in self.planted]
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "GenConfig":
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "GenConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def planted_index(self) -> dict[int, list[tuple[int, int]]]:
        """Planted (p, q) field-index pairs (p < q) per type id."""
        out: dict[int, list[tuple[int, int]]] = {t: [] for t in range(len(self.type_names))}
        for p in self.planted:
            a, b = sorted(self.fields.index(f) for f in p.fields)
            out[self.type_names.index(p.conv_type)].append((a, b))
        return out

    def line_types(self) -> dict[str, str]:
        return {f"{t}-L{j}": t for t in self.type_names for j in range(self.lines_per_type)}


class SyntheticLogs(NamedTuple):
    impressions: list[ImpressionRecord]
    conversions: list[ConversionRecord]
    line_types: dict[str, str]
    tables: list[np.ndarray]


def _truth(config: GenConfig, seq: np.random.SeedSequence):
    rng = np.random.default_rng(seq)
    tables = [rng.standard_normal((config.cardinalities[config.fields.index(p.fields[0])],
                                   config.cardinalities[config.fields.index(p.fields[1])]))
              for p in config.planted]
    mains = [[config.main_effect * rng.standard_normal(c) for c in config.cardinalities]
             for _ in config.type_names]
    return tables, mains


def generate_synthetic(config: GenConfig) -> SyntheticLogs:
    """Seeded logs; each day draws from its own child seed."""
    truth_seq, *day_seqs = np.random.SeedSequence(config.seed).spawn(config.days + 1)
    tables, mains = _truth(config, truth_seq)
    T = len(config.type_names)
    share = np.asarray(config.type_share, dtype=np.float64)
    share = share / share.sum()
    base = logit(np.asarray(config.base_rates, dtype=np.float64))
    fidx = [(config.type_names.index(p.conv_type), config.fields.index(p.fields[0]), config.fields.index(p.fields[1]))
            for p in config.planted]
    window = config.window_days * DAY
    impressions, conversions = [], []
    for day, seq in enumerate(day_seqs):
        rng = np.random.default_rng(seq)
        n = config.impressions_per_day
        types = rng.choice(T, size=n, p=share)
        lines = rng.integers(0, config.lines_per_type, n)
        users = rng.integers(0, config.num_users, n)
        values = np.stack([rng.integers(0, c, n) for c in config.cardinalities], axis=1)
        ts = config.start_ts + day * DAY + rng.integers(0, DAY, n)
        u = rng.random(n)
        delay = rng.integers(0, window + 1, n)

        z = base[types].copy()
        for (t, a, b), p, table in zip(fidx, config.planted, tables):
            sel = types == t
            z[sel] += p.effect * table[values[sel, a], values[sel, b]]
        if config.main_effect:
            for t in range(T):
                sel = types == t
                for k, m in enumerate(mains[t]):
                    z[sel] += m[values[sel, k]]
        prob = expit(z)
        if not ((prob > 0) & (prob < 1)).all():
            raise SyntheticConfigError("effect sizes drive conversion probabilities to 0 or 1")
        converted = u < prob

        for i in np.argsort(ts, kind="stable"):
            tname = config.type_names[types[i]]
            line_id = f"{tname}-L{lines[i]}"
            user_id = f"u{users[i]}"
            fv = {f: str(v) for f, v in zip(config.fields, values[i].tolist())}
            impressions.append(ImpressionRecord(int(ts[i]), user_id, line_id, fv))
            if converted[i]:
                conversions.append(ConversionRecord(int(ts[i] + delay[i]), user_id, line_id, tname))
    conversions.sort(key=lambda c: c.timestamp)
    return SyntheticLogs(impressions, conversions, config.line_types(), tables)


def write_logs(directory, logs: SyntheticLogs, compress: bool = False) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".ndjson.gz" if compress else ".ndjson"
    paths = {
        "impressions": out / f"impressions{ext}",
        "conversions": out / f"conversions{ext}",
        "lines": out / "lines.json",
    }
    write_ndjson(paths["impressions"], logs.impressions)
    write_ndjson(paths["conversions"], logs.conversions)
    paths["lines"].write_text(json.dumps(logs.line_types, indent=1, sort_keys=True))
    return paths
