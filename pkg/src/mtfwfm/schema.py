"""Multi-field categorical data: field schema, single instances and columnar instance sets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConvTypeError, DataError, SchemaError

TYPE_FIELD = "Conversion_Type_ID"
OOV_TOKEN = "__oov__"
MISSING_TOKEN = "__missing__"


@dataclass
class FieldSchema:
    """Ordered fields with one contiguous block of feature indices per field.

    Within a field's block the first index is reserved for out-of-vocabulary
    values, so every field owns at least one feature.  ``type_names`` lists
    the conversion types; their ids are positions in that list.
    """

    fields: list[str]
    feature_dict: list[dict[str, int]]
    oov_index: list[int]
    type_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.fields) != len(self.feature_dict) or len(self.fields) != len(self.oov_index):
            raise SchemaError("fields, feature_dict and oov_index must have equal length")
        if len(set(self.fields)) != len(self.fields):
            raise SchemaError("duplicate field names")
        field_of = np.full(self.num_features, -1, dtype=np.int64)
        for k, (mapping, oov) in enumerate(zip(self.feature_dict, self.oov_index)):
            for idx in [oov, *mapping.values()]:
                if not 0 <= idx < self.num_features:
                    raise SchemaError(f"feature index {idx} outside [0, {self.num_features})")
                if field_of[idx] not in (-1, k):
                    raise SchemaError(f"feature index {idx} belongs to two fields")
                field_of[idx] = k
        if (field_of < 0).any():
            raise SchemaError("feature indices are not dense")
        self._field_of = field_of

    @classmethod
    def build(
        cls,
        fields: Sequence[str],
        values: Sequence[Iterable[str]],
        type_names: Sequence[str] = (),
    ) -> "FieldSchema":
        """Lay out contiguous per-field blocks: OOV first, then ``values[k]`` in order."""
        if len(fields) != len(values):
            raise SchemaError("need one value list per field")
        feature_dict, oov_index = [], []
        offset = 0
        for vals in values:
            oov_index.append(offset)
            offset += 1
            mapping = {}
            for v in vals:
                if v == OOV_TOKEN or v in mapping:
                    continue
                mapping[v] = offset
                offset += 1
            feature_dict.append(mapping)
        return cls(list(fields), feature_dict, oov_index, list(type_names))

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def num_features(self) -> int:
        return sum(len(m) + 1 for m in self.feature_dict)

    @property
    def num_types(self) -> int:
        return len(self.type_names)

    @property
    def field_of(self) -> np.ndarray:
        """F(i): field index of every feature index."""
        return self._field_of

    @property
    def field_sizes(self) -> tuple[int, ...]:
        return tuple(len(m) + 1 for m in self.feature_dict)

    def field_index(self, name: str) -> int:
        try:
            return self.fields.index(name)
        except ValueError:
            raise DataError(f"unknown field {name!r}") from None

    def type_id(self, name: str) -> int:
        try:
            return self.type_names.index(name)
        except ValueError:
            raise DataError(f"unknown conversion type {name!r}") from None

    def encode_values(self, values: Mapping[str, str]) -> np.ndarray:
        """Map raw field values to one active feature per field (OOV fallback)."""
        out = np.empty(self.num_fields, dtype=np.int64)
        for k, name in enumerate(self.fields):
            raw = values.get(name, MISSING_TOKEN)
            out[k] = self.feature_dict[k].get(raw, self.oov_index[k])
        return out

    def ctf_field_names(self) -> list[str]:
        return [*self.fields, TYPE_FIELD]

    def check_aligned(self, active: np.ndarray) -> None:
        active = np.asarray(active)
        if active.ndim != 2 or active.shape[1] != self.num_fields:
            raise SchemaError(f"expected {self.num_fields} active features per instance")
        if active.size and (active.min() < 0 or active.max() >= self.num_features):
            raise SchemaError("feature index out of range")
        if not (self._field_of[active] == np.arange(self.num_fields)).all():
            raise SchemaError("instance is not field-aligned")

    def digest(self) -> dict:
        return {
            "fields": list(self.fields),
            "cardinalities": list(self.field_sizes),
            "type_names": list(self.type_names),
        }

    def schema_id(self) -> int:
        blob = json.dumps(self.digest(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")

    def to_json(self) -> dict:
        return {
            "fields": self.fields,
            "feature_dict": self.feature_dict,
            "oov_index": self.oov_index,
            "type_names": self.type_names,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FieldSchema":
        return cls(
            list(doc["fields"]),
            [{str(k): int(v) for k, v in m.items()} for m in doc["feature_dict"]],
            [int(i) for i in doc["oov_index"]],
            list(doc.get("type_names", [])),
        )


@dataclass(frozen=True)
class SparseInstance:
    """One active feature per field plus the sample's conversion type and label."""

    active: np.ndarray
    conv_type: int
    label: int = 0
    weight: float = 1.0


@dataclass
class InstanceSet:
    """Columnar storage for many :class:`SparseInstance` rows.

    ``X`` holds the base-field feature indices (n, N).  CTF models append the
    conversion-type feature themselves, so the same set feeds every model kind.
    """

    X: np.ndarray
    conv_type: np.ndarray
    label: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.int64)
        if self.X.ndim != 2:
            raise SchemaError("X must be 2-D (instances x fields)")
        n = self.X.shape[0]
        self.conv_type = np.asarray(self.conv_type, dtype=np.int64).reshape(n)
        self.label = np.asarray(self.label, dtype=np.float64).reshape(n)
        if self.weight is None:
            self.weight = np.ones(n)
        else:
            self.weight = np.asarray(self.weight, dtype=np.float64).reshape(n)
        if n and not np.isin(self.label, (0.0, 1.0)).all():
            raise DataError("labels must be binary")
        if (self.weight < 0).any():
            raise DataError("instance weights must be nonnegative")

    @classmethod
    def from_instances(cls, instances: Sequence[SparseInstance]) -> "InstanceSet":
        if not instances:
            return cls(np.zeros((0, 0), dtype=np.int64), [], [], [])
        return cls(
            np.stack([np.asarray(i.active) for i in instances]),
            [i.conv_type for i in instances],
            [i.label for i in instances],
            [i.weight for i in instances],
        )

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> SparseInstance:
        return SparseInstance(self.X[i].copy(), int(self.conv_type[i]), int(self.label[i]), float(self.weight[i]))

    def __iter__(self) -> Iterator[SparseInstance]:
        return (self[i] for i in range(len(self)))

    @property
    def num_fields(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "InstanceSet":
        return InstanceSet(self.X[idx], self.conv_type[idx], self.label[idx], self.weight[idx])

    def check_types(self, num_types: int) -> None:
        if len(self) and (self.conv_type.min() < 0 or self.conv_type.max() >= num_types):
            raise ConvTypeError(f"conversion type outside [0, {num_types})")

    def concat(self, other: "InstanceSet") -> "InstanceSet":
        return InstanceSet(
            np.concatenate([self.X, other.X]),
            np.concatenate([self.conv_type, other.conv_type]),
            np.concatenate([self.label, other.label]),
            np.concatenate([self.weight, other.weight]),
        )
