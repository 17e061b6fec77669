"""Impression/conversion logs to labeled, encoded datasets.

Impressions are labeled by last-touch attribution: each conversion credits
the latest impression of the same (user, line) at or before it, provided the
conversion falls within the attribution window.  Lines carry exactly one
conversion type.  Splits are taken by impression day; only the training
split is negatively downsampled.
"""

from __future__ import annotations

import bisect
import csv
import gzip
import io
import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError
from .schema import MISSING_TOKEN, FieldSchema, InstanceSet

DAY = 86_400

# the 17 feature fields of the production data set
DEFAULT_FIELDS = [
    "User_ID", "Gender", "Age_Bucket",
    "Page_TLD", "Publisher_ID", "Subdomain",
    "Advertiser_ID", "Creative_ID", "AD_ID", "Creative_Media_ID", "Layout_ID", "Line_ID",
    "Hour_of_Day", "Day_of_Week", "Device_Type_ID", "Ad_Position_ID", "Ad_Placement_ID",
]


@dataclass
class ImpressionRecord:
    timestamp: int
    user_id: str
    line_id: str
    field_values: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "user_id": self.user_id, "line_id": self.line_id,
                "fields": self.field_values}


@dataclass
class ConversionRecord:
    timestamp: int
    user_id: str
    line_id: str
    conv_type: str

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError("conversion timestamp must be nonnegative")

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "user_id": self.user_id, "line_id": self.line_id,
                "conv_type": self.conv_type}


@dataclass
class LabeledImpression:
    impression: ImpressionRecord
    label: int
    conv_type: str
    conversion_ts: int | None = None

    @property
    def day(self) -> int:
        return self.impression.timestamp // DAY


@dataclass
class AttributionResult:
    labeled: list[LabeledImpression]
    matched: int = 0
    unmatched: int = 0
    recredited: int = 0  # conversions whose last touch was already positive


@dataclass
class PipelineConfig:
    """Day ranges are half-open ``[start, end)`` day indices (timestamp // 86400)."""

    fields: list[str] = field(default_factory=lambda: list(DEFAULT_FIELDS))
    type_names: list[str] | None = None
    train_days: tuple[int, int] = (0, 7)
    val_days: tuple[int, int] = (7, 8)
    test_days: tuple[int, int] = (8, 9)
    attribution_window_days: int = 6
    downsample: float = 1.0
    per_type_keep: dict[str, float] | None = None
    min_feature_freq: int = 2
    seed: int = 0

    def __post_init__(self):
        spans = sorted([tuple(self.train_days), tuple(self.val_days), tuple(self.test_days)])
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if a1 > b0:
                raise DataError("train/val/test day ranges overlap")
        if any(a >= b for a, b in spans):
            raise DataError("empty day range")
        if not 0 < self.downsample <= 1:
            raise DataError("downsample keep probability must be in (0, 1]")
        if self.attribution_window_days < 0:
            raise DataError("attribution window must be nonnegative")


def attribute(
    impressions: Sequence[ImpressionRecord],
    conversions: Sequence[ConversionRecord],
    line_types: Mapping[str, str],
    window_days: float = 6,
) -> AttributionResult:
    """Last-touch attribution grouped by (user_id, line_id).

    An impression at ``ts`` is credited by a conversion at ``c`` when it is
    the latest impression of the group with ``ts <= c <= ts + window``
    (equal timestamps resolve to the later input record).  Conversions are
    processed in time order and an impression is labeled positive once.
    """
    window = window_days * DAY
    labeled = []
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for idx, imp in enumerate(impressions):
        try:
            ltype = line_types[imp.line_id]
        except KeyError:
            raise DataError(f"line {imp.line_id!r} has no configured conversion type") from None
        labeled.append(LabeledImpression(imp, 0, ltype))
        groups[(imp.user_id, imp.line_id)].append(idx)
    ts_index = {}
    for key, idxs in groups.items():
        idxs.sort(key=lambda i: (impressions[i].timestamp, i))
        ts_index[key] = [impressions[i].timestamp for i in idxs]

    result = AttributionResult(labeled)
    order = sorted(range(len(conversions)), key=lambda j: (conversions[j].timestamp, j))
    for j in order:
        conv = conversions[j]
        key = (conv.user_id, conv.line_id)
        stamps = ts_index.get(key)
        pos = bisect.bisect_right(stamps, conv.timestamp) - 1 if stamps else -1
        if pos < 0 or conv.timestamp > stamps[pos] + window:
            result.unmatched += 1
            continue
        target = labeled[groups[key][pos]]
        result.matched += 1
        if target.label:
            result.recredited += 1
            continue
        target.label = 1
        target.conv_type = conv.conv_type
        target.conversion_ts = conv.timestamp
    return result


def split_by_day(labeled: Iterable[LabeledImpression], config: PipelineConfig) -> dict[str, list[LabeledImpression]]:
    out = {"train": [], "val": [], "test": []}
    spans = {"train": config.train_days, "val": config.val_days, "test": config.test_days}
    for rec in labeled:
        d = rec.day
        for name, (a, b) in spans.items():
            if a <= d < b:
                out[name].append(rec)
                break
    return out


def downsample_negatives(
    labeled: Sequence[LabeledImpression],
    keep: float,
    seed: int,
    per_type_keep: Mapping[str, float] | None = None,
) -> list[LabeledImpression]:
    """Keep every positive and each negative independently with its type's keep probability."""
    if not 0 < keep <= 1:
        raise DataError("keep probability must be in (0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(labeled))
    out = []
    for rec, u in zip(labeled, draws):
        p = keep if per_type_keep is None else per_type_keep.get(rec.conv_type, keep)
        if rec.label == 1 or u < p:
            out.append(rec)
    return out


def build_schema(
    train: Sequence[LabeledImpression],
    fields: Sequence[str],
    type_names: Sequence[str],
    min_freq: int = 2,
) -> FieldSchema:
    """Dictionaries from the training split; rarer values fall back to the field's OOV index."""
    counters = [Counter() for _ in fields]
    for rec in train:
        fv = rec.impression.field_values
        for c, name in zip(counters, fields):
            c[fv.get(name, MISSING_TOKEN)] += 1
    for c, name in zip(counters, fields):
        if train and set(c) == {MISSING_TOKEN}:
            raise DataError(f"unknown field {name!r}: absent from every training impression")
    values = [sorted(v for v, n in c.items() if n >= min_freq) for c in counters]
    return FieldSchema.build(list(fields), values, list(type_names))


def encode(records: Sequence[LabeledImpression], schema: FieldSchema) -> InstanceSet:
    n = len(records)
    X = np.empty((n, schema.num_fields), dtype=np.int64)
    t = np.empty(n, dtype=np.int64)
    y = np.empty(n)
    type_ids = {name: i for i, name in enumerate(schema.type_names)}
    for i, rec in enumerate(records):
        X[i] = schema.encode_values(rec.impression.field_values)
        try:
            t[i] = type_ids[rec.conv_type]
        except KeyError:
            raise DataError(f"unknown conversion type {rec.conv_type!r}") from None
        y[i] = rec.label
    return InstanceSet(X.reshape(n, schema.num_fields), t, y)


def augment_ctf(data: InstanceSet, schema: FieldSchema) -> InstanceSet:
    """Append the conversion-type field: type t activates feature ``M + t``."""
    col = (schema.num_features + data.conv_type)[:, None]
    return InstanceSet(np.concatenate([data.X, col], axis=1), data.conv_type, data.label, data.weight)


def feature_counts(data: InstanceSet, schema: FieldSchema) -> dict[str, int]:
    """Distinct in-vocabulary features active per conversion type."""
    oov = np.asarray(schema.oov_index)
    out = {}
    for t, name in enumerate(schema.type_names):
        X = data.X[data.conv_type == t]
        feats = np.unique(X)
        out[name] = int(np.setdiff1d(feats, oov).size)
    return out


@dataclass
class PreparedData:
    schema: FieldSchema
    splits: dict[str, InstanceSet]
    stats: dict


def prepare(
    impressions: Sequence[ImpressionRecord],
    conversions: Sequence[ConversionRecord],
    line_types: Mapping[str, str],
    config: PipelineConfig,
) -> PreparedData:
    """Attribute, split by day, downsample training negatives, build dictionaries, encode."""
    att = attribute(impressions, conversions, line_types, config.attribution_window_days)
    splits = split_by_day(att.labeled, config)
    splits["train"] = downsample_negatives(splits["train"], config.downsample, config.seed, config.per_type_keep)
    type_names = config.type_names or sorted(set(line_types.values()))
    schema = build_schema(splits["train"], config.fields, type_names, config.min_feature_freq)
    encoded = {name: encode(recs, schema) for name, recs in splits.items()}
    stats = {
        "attribution": {"matched": att.matched, "unmatched": att.unmatched, "recredited": att.recredited},
        "splits": {},
    }
    for name, data in encoded.items():
        per_type = {}
        feats = feature_counts(data, schema)
        for t, tname in enumerate(type_names):
            sel = data.conv_type == t
            n = int(sel.sum())
            per_type[tname] = {"samples": n, "cvr": float(data.label[sel].mean()) if n else None,
                               "features": feats[tname]}
        stats["splits"][name] = per_type
    return PreparedData(schema, encoded, stats)


# -- log files -------------------------------------------------------------------

class _ClosingWrapper(io.TextIOWrapper):
    """Text wrapper that also closes the file object under a GzipFile."""

    def close(self):
        inner = self.buffer.fileobj
        super().close()
        inner.close()


def _open_text(path, mode="rt"):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            # fixed mtime keeps compressed output byte-reproducible
            raw = gzip.GzipFile(filename="", fileobj=open(path, "wb"), mode="wb", mtime=0)
            return _ClosingWrapper(raw, encoding="utf-8", newline="")
        return gzip.open(path, mode, encoding="utf-8", newline="")
    return open(path, mode.replace("t", ""), encoding="utf-8", newline="")


def _is_csv(path) -> bool:
    suffixes = Path(path).suffixes
    return ".csv" in suffixes


def _iter_ndjson(path) -> Iterator[dict]:
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def read_impressions(path, fields: Sequence[str] | None = None) -> list[ImpressionRecord]:
    """NDJSON rows ``{timestamp, user_id, line_id, fields: {...}}`` or CSV with one column per field."""
    out = []
    try:
        if _is_csv(path):
            with _open_text(path) as fh:
                for row in csv.DictReader(fh):
                    ts, uid, lid = int(row.pop("timestamp")), row.pop("user_id"), row.pop("line_id")
                    out.append(ImpressionRecord(ts, uid, lid, dict(row)))
        else:
            for doc in _iter_ndjson(path):
                out.append(ImpressionRecord(int(doc["timestamp"]), str(doc["user_id"]), str(doc["line_id"]),
                                            {str(k): str(v) for k, v in doc.get("fields", {}).items()}))
    except KeyError as exc:
        raise DataError(f"{path}: impression missing key {exc}") from None
    if fields is not None:
        for rec in out:
            for name in fields:
                rec.field_values.setdefault(name, MISSING_TOKEN)
    return out


def read_conversions(path) -> list[ConversionRecord]:
    try:
        if _is_csv(path):
            with _open_text(path) as fh:
                return [ConversionRecord(int(r["timestamp"]), r["user_id"], r["line_id"], r["conv_type"])
                        for r in csv.DictReader(fh)]
        return [ConversionRecord(int(d["timestamp"]), str(d["user_id"]), str(d["line_id"]), str(d["conv_type"]))
                for d in _iter_ndjson(path)]
    except KeyError as exc:
        raise DataError(f"{path}: conversion missing key {exc}") from None


def write_ndjson(path, records: Iterable) -> None:
    with _open_text(path, "wt") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def write_impressions_csv(path, records: Sequence[ImpressionRecord], fields: Sequence[str]) -> None:
    with _open_text(path, "wt") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "user_id", "line_id", *fields])
        for r in records:
            w.writerow([r.timestamp, r.user_id, r.line_id, *(r.field_values.get(f, MISSING_TOKEN) for f in fields)])


# -- binary instance files --------------------------------------------------------

_INST_MAGIC = b"MTFI"
_INST_HEADER = struct.Struct("<4sHIIQ")  # magic, version, schema id, N, count


def _record_dtype(n_fields: int) -> np.dtype:
    return np.dtype([("x", "<u4", (n_fields,)), ("t", "u1"), ("y", "u1")])


def write_instances(path, data: InstanceSet, schema: FieldSchema) -> None:
    """Header then one packed record per instance: N u32 features, u8 type, u8 label."""
    n_fields = data.num_fields
    if data.conv_type.size and data.conv_type.max() > 255:
        raise DataError("binary format holds at most 256 conversion types")
    rec = np.empty(len(data), dtype=_record_dtype(n_fields))
    rec["x"] = data.X
    rec["t"] = data.conv_type
    rec["y"] = data.label
    with open(path, "wb") as fh:
        fh.write(_INST_HEADER.pack(_INST_MAGIC, 1, schema.schema_id(), n_fields, len(data)))
        fh.write(rec.tobytes())


def read_instances(path) -> tuple[InstanceSet, int]:
    """Returns the instances and the schema id stored in the header."""
    blob = Path(path).read_bytes()
    if len(blob) < _INST_HEADER.size:
        raise DataError(f"{path}: truncated instance file")
    magic, version, schema_id, n_fields, count = _INST_HEADER.unpack_from(blob)
    if magic != _INST_MAGIC or version != 1:
        raise DataError(f"{path}: not an instance file")
    dt = _record_dtype(n_fields)
    if len(blob) != _INST_HEADER.size + count * dt.itemsize:
        raise DataError(f"{path}: size does not match header")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=_INST_HEADER.size)
    data = InstanceSet(rec["x"].astype(np.int64).reshape(count, n_fields), rec["t"].astype(np.int64),
                       rec["y"].astype(np.float64))
    return data, schema_id


def write_schema(path, schema: FieldSchema) -> None:
    doc = schema.to_json()
    doc["schema_id"] = schema.schema_id()
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_schema(path) -> FieldSchema:
    try:
        return FieldSchema.from_json(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad schema file ({exc})") from None
