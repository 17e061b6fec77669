"""Forward models: 2-way CTF FM/FwFM, MT-FwFM and 3-way CTF FwFM.

Every kind shares one vectorized kernel.  A sample selects a *task row* of
the per-task tensors (bias, main weights, interaction weights): its
conversion type for MT-FwFM, row 0 for the CTF baselines, which instead
append the conversion type as an extra field with feature id ``M + t``.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConvTypeError, DataError, SchemaError
from .schema import FieldSchema, InstanceSet, SparseInstance

FORMAT_VERSION = "mtfwfm-v1"
PROB_EPS = 1e-15


class ModelKind(str, enum.Enum):
    FM_CTF2 = "fm-ctf2"
    FWFM_CTF2 = "fwfm-ctf2"
    MT_FWFM = "mt-fwfm"
    FWFM_CTF3 = "fwfm-ctf3"

    @property
    def is_ctf(self) -> bool:
        return self is not ModelKind.MT_FWFM


@dataclass(frozen=True)
class ModelConfig:
    """Model shape.  ``num_fields``/``num_features`` exclude the conversion-type field.

    ``field_sizes`` (per-field cardinalities summing to ``num_features``) is
    optional; when given, instances are checked for field alignment.
    ``ctf3_weighted_pairs`` selects how the 3-way model weights its 2-way
    term: by the learned field interaction weights (default) or by 1.
    """

    kind: ModelKind
    num_fields: int
    num_features: int
    num_types: int
    embed_dim: int
    field_sizes: tuple[int, ...] | None = None
    ctf3_weighted_pairs: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.embed_dim < 1 or self.num_types < 1 or self.num_fields < 2:
            raise SchemaError("need K >= 1, T >= 1, N >= 2")
        # M < N only makes sense for counting; real data brings field_sizes
        if self.num_features < 1:
            raise SchemaError("need M >= 1")
        if self.field_sizes is not None:
            sizes = tuple(int(s) for s in self.field_sizes)
            if len(sizes) != self.num_fields or sum(sizes) != self.num_features or min(sizes) < 1:
                raise SchemaError("field_sizes must give N positive sizes summing to M")
            object.__setattr__(self, "field_sizes", sizes)

    @classmethod
    def for_schema(cls, kind, schema: FieldSchema, embed_dim: int, **kw) -> "ModelConfig":
        return cls(kind, schema.num_fields, schema.num_features, schema.num_types, embed_dim,
                   field_sizes=schema.field_sizes, **kw)

    @property
    def model_fields(self) -> int:
        return self.num_fields + 1 if self.kind.is_ctf else self.num_fields

    @property
    def model_features(self) -> int:
        return self.num_features + self.num_types if self.kind.is_ctf else self.num_features

    @property
    def task_rows(self) -> int:
        return self.num_types if self.kind is ModelKind.MT_FWFM else 1

    def field_of(self) -> np.ndarray | None:
        if self.field_sizes is None:
            return None
        f = np.repeat(np.arange(self.num_fields), self.field_sizes)
        if self.kind.is_ctf:
            f = np.concatenate([f, np.full(self.num_types, self.num_fields)])
        return f

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "num_fields": self.num_fields,
            "num_features": self.num_features,
            "num_types": self.num_types,
            "embed_dim": self.embed_dim,
            "field_sizes": list(self.field_sizes) if self.field_sizes is not None else None,
            "ctf3_weighted_pairs": self.ctf3_weighted_pairs,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        sizes = doc.get("field_sizes")
        return cls(
            ModelKind(doc["kind"]), int(doc["num_fields"]), int(doc["num_features"]),
            int(doc["num_types"]), int(doc["embed_dim"]),
            tuple(sizes) if sizes is not None else None,
            bool(doc.get("ctf3_weighted_pairs", True)),
        )


def interaction_mask(config: ModelConfig) -> np.ndarray | None:
    """Boolean (N', N') mask of learnable interaction entries, or None if r is fixed."""
    if config.kind is ModelKind.FM_CTF2:
        return None
    n = config.model_fields
    mask = ~np.eye(n, dtype=bool)
    if config.kind is ModelKind.FWFM_CTF3 and not config.ctf3_weighted_pairs:
        # only the 3-way term carries r; pairs with the type field are unused
        mask[config.num_fields, :] = False
        mask[:, config.num_fields] = False
    return mask


@dataclass
class ModelParams:
    """All learnable tensors.

    bias (P,), embeddings (M', K), main_weights (P, N', K) and
    interaction_weights (P, N', N'), where P is the number of task rows and
    primes denote sizes including the type field for CTF kinds.  The
    interaction tensor is symmetric with a zero diagonal; FM_CTF2 has none.
    """

    config: ModelConfig
    bias: np.ndarray
    embeddings: np.ndarray
    main_weights: np.ndarray
    interaction_weights: np.ndarray | None = None
    _mask: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        c = self.config
        expect = {
            "bias": (c.task_rows,),
            "embeddings": (c.model_features, c.embed_dim),
            "main_weights": (c.task_rows, c.model_fields, c.embed_dim),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise SchemaError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        self._mask = interaction_mask(c)
        if self._mask is None:
            if self.interaction_weights is not None:
                raise SchemaError("FM_CTF2 has no learnable interaction weights")
        else:
            shape = (c.task_rows, c.model_fields, c.model_fields)
            if self.interaction_weights is None:
                self.interaction_weights = np.zeros(shape)
            r = np.asarray(self.interaction_weights, dtype=np.float64)
            if r.shape != shape:
                raise SchemaError(f"interaction_weights has shape {r.shape}, expected {shape}")
            if not np.array_equal(r, r.transpose(0, 2, 1)):
                raise SchemaError("interaction weights must be symmetric")
            if (r[:, ~self._mask] != 0).any():
                raise SchemaError("fixed interaction entries must be zero")
            self.interaction_weights = r

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        c = config
        r = None if c.kind is ModelKind.FM_CTF2 else np.zeros((c.task_rows, c.model_fields, c.model_fields))
        return cls(c, np.zeros(c.task_rows), np.zeros((c.model_features, c.embed_dim)),
                   np.zeros((c.task_rows, c.model_fields, c.embed_dim)), r)

    @property
    def kind(self) -> ModelKind:
        return self.config.kind

    @property
    def mask(self) -> np.ndarray | None:
        return self._mask

    def pairwise_weights(self) -> np.ndarray:
        """(P, N', N') weights on <v_i, v_j> in the 2-way term (fixed 1 where r is absent)."""
        c = self.config
        if c.kind is ModelKind.FM_CTF2 or (c.kind is ModelKind.FWFM_CTF3 and not c.ctf3_weighted_pairs):
            n = c.model_fields
            return (1.0 - np.eye(n))[None]
        return self.interaction_weights

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"bias": self.bias, "embeddings": self.embeddings, "main_weights": self.main_weights}
        if self.interaction_weights is not None:
            out["interaction_weights"] = self.interaction_weights
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, **{k: v.copy() for k, v in self.tensors().items()})

    def num_free_parameters(self) -> int:
        n = self.bias.size + self.embeddings.size + self.main_weights.size
        if self._mask is not None:
            n += self.config.task_rows * int(np.triu(self._mask, 1).sum())
        return n

    def set_interaction(self, row: int, p: int, q: int, value: float) -> None:
        if self._mask is None or not self._mask[p, q]:
            raise SchemaError(f"interaction ({p}, {q}) is not learnable")
        self.interaction_weights[row, p, q] = value
        self.interaction_weights[row, q, p] = value

    def equal(self, other: "ModelParams") -> bool:
        a, b = self.tensors(), other.tensors()
        return self.config == other.config and a.keys() == b.keys() and all(
            np.array_equal(a[k], b[k]) for k in a)


@dataclass(frozen=True)
class Prediction:
    phi: float
    prob: float


class ForwardCache(NamedTuple):
    X: np.ndarray        # (B, N') active features incl. the type field for CTF kinds
    rows: np.ndarray     # (B,) task row per sample
    V: np.ndarray        # (B, N', K) active embeddings
    W: np.ndarray        # (B, N', K) main weight vectors of the sample's task row
    R: np.ndarray        # (B or 1, N', N') 2-way pair weights
    G: np.ndarray        # (B, N', N') embedding Gram matrices
    H: np.ndarray | None  # (B, N, N) 3-way products <v_i, v_j, v_t>
    R3: np.ndarray | None  # (1, N, N) 3-way interaction weights
    phi: np.ndarray


def sigmoid(x):
    """Logistic function; scipy's expit is overflow-free for any finite input."""
    return expit(x)


def fwfm_phi(bias, embeddings, main_weights, interaction_weights, X) -> np.ndarray:
    """Single-task FwFM score over the fields of ``X`` (no conversion-type field)."""
    V = embeddings[X]
    G = V @ V.transpose(0, 2, 1)
    return _combine(bias, V, main_weights[None], interaction_weights[None], G)


def _combine(b, V, W, R, G, three_way=None) -> np.ndarray:
    main = (V * W).sum(axis=(1, 2))
    pair = 0.5 * (R * G).sum(axis=(1, 2))
    phi = b + main + pair
    if three_way is not None:
        phi = phi + three_way
    return phi


def prepare_inputs(params: ModelParams, X, conv_type) -> tuple[np.ndarray, np.ndarray]:
    """Validate a batch and return (augmented X, task rows)."""
    c = params.config
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[None]
    t = np.asarray(conv_type, dtype=np.int64).reshape(-1)
    if t.shape[0] != X.shape[0]:
        raise SchemaError("one conversion type per instance required")
    if t.size and (t.min() < 0 or t.max() >= c.num_types):
        raise ConvTypeError(f"conversion type outside [0, {c.num_types})")
    if c.kind.is_ctf:
        if X.shape[1] == c.num_fields:
            X = np.concatenate([X, (c.num_features + t)[:, None]], axis=1)
        elif X.shape[1] == c.num_fields + 1:
            if not np.array_equal(X[:, -1], c.num_features + t):
                raise SchemaError("conversion-type feature does not match conv_type")
        else:
            raise SchemaError(f"expected {c.num_fields} (or {c.num_fields + 1}) active features, got {X.shape[1]}")
    elif X.shape[1] != c.num_fields:
        raise SchemaError(f"expected {c.num_fields} active features, got {X.shape[1]}")
    if X.size and (X.min() < 0 or X.max() >= c.model_features):
        raise SchemaError("feature index out of range")
    f = c.field_of()
    if f is not None and not (f[X] == np.arange(X.shape[1])).all():
        raise SchemaError("instance is not field-aligned")
    rows = t if c.kind is ModelKind.MT_FWFM else np.zeros_like(t)
    return X, rows


def forward(params: ModelParams, X, conv_type, *, validate: bool = True) -> ForwardCache:
    """Batched forward pass keeping the intermediates needed for gradients."""
    c = params.config
    if validate:
        X, rows = prepare_inputs(params, X, conv_type)
    else:
        rows = conv_type if c.kind is ModelKind.MT_FWFM else np.zeros_like(conv_type)
    V = params.embeddings[X]
    W = params.main_weights[rows]
    R = params.pairwise_weights()
    if R.shape[0] > 1:
        R = R[rows]
    G = V @ V.transpose(0, 2, 1)
    H = R3 = three = None
    if c.kind is ModelKind.FWFM_CTF3:
        n = c.num_fields
        Vb = V[:, :n]
        vt = V[:, n]
        H = (Vb * vt[:, None, :]) @ Vb.transpose(0, 2, 1)
        R3 = params.interaction_weights[:, :n, :n]
        three = 0.5 * (R3 * H).sum(axis=(1, 2))
    phi = _combine(params.bias[rows], V, W, R, G, three)
    return ForwardCache(X, rows, V, W, R, G, H, R3, phi)


def score(params: ModelParams, data: InstanceSet | np.ndarray, conv_type=None) -> np.ndarray:
    """Pre-sigmoid scores for a batch."""
    if isinstance(data, InstanceSet):
        X, conv_type = data.X, data.conv_type
    else:
        X = data
    return forward(params, X, conv_type).phi


def predict_proba(params: ModelParams, data: InstanceSet | np.ndarray, conv_type=None) -> np.ndarray:
    return np.clip(sigmoid(score(params, data, conv_type)), PROB_EPS, 1.0 - PROB_EPS)


def _phi_single(params: ModelParams, inst: SparseInstance, kinds) -> float:
    if params.kind not in kinds:
        raise SchemaError(f"model kind {params.kind.value} not valid here")
    return float(forward(params, np.asarray(inst.active)[None], [inst.conv_type]).phi[0])


def phi_fwfm(params: ModelParams, inst: SparseInstance) -> float:
    """2-way CTF score; FM_CTF2 uses unit field interaction weights."""
    return _phi_single(params, inst, (ModelKind.FM_CTF2, ModelKind.FWFM_CTF2))


def phi_mt_fwfm(params: ModelParams, inst: SparseInstance) -> float:
    return _phi_single(params, inst, (ModelKind.MT_FWFM,))


def phi_3way_ctf(params: ModelParams, inst: SparseInstance) -> float:
    return _phi_single(params, inst, (ModelKind.FWFM_CTF3,))


def predict(params: ModelParams, inst: SparseInstance) -> Prediction:
    phi = _phi_single(params, inst, tuple(ModelKind))
    return Prediction(phi, float(np.clip(sigmoid(phi), PROB_EPS, 1.0 - PROB_EPS)))


# -- persistence ---------------------------------------------------------------

_MAGIC = (FORMAT_VERSION + "\n").encode()


def _header(params: ModelParams, schema: FieldSchema | dict | None) -> dict:
    digest = schema.digest() if isinstance(schema, FieldSchema) else schema
    return {
        "version": FORMAT_VERSION,
        "config": params.config.to_json(),
        "schema": digest,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors().items()],
    }


def dumps_model(params: ModelParams, schema: FieldSchema | dict | None = None) -> bytes:
    """Binary form: tag line, u64 header length, JSON header, little-endian float64 tensors."""
    head = json.dumps(_header(params, schema), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for arr in params.tensors().values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> tuple[ModelParams, dict | None]:
    if not blob.startswith(_MAGIC):
        raise DataError("not an mtfwfm-v1 model file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    head = json.loads(blob[pos:pos + hlen])
    pos += hlen
    tensors = {}
    for entry in head["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        pos += 8 * count
    if pos != len(blob):
        raise DataError("trailing bytes in model file")
    return ModelParams(ModelConfig.from_json(head["config"]), **tensors), head["schema"]


def model_to_json(params: ModelParams, schema: FieldSchema | dict | None = None) -> dict:
    doc = _header(params, schema)
    doc["data"] = {k: v.ravel().tolist() for k, v in params.tensors().items()}
    return doc


def model_from_json(doc: dict) -> tuple[ModelParams, dict | None]:
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported model version {doc.get('version')!r}")
    tensors = {s["name"]: np.asarray(doc["data"][s["name"]], dtype=np.float64).reshape(s["shape"])
               for s in doc["tensors"]}
    return ModelParams(ModelConfig.from_json(doc["config"]), **tensors), doc.get("schema")


def save_model(path, params: ModelParams, schema: FieldSchema | dict | None = None) -> Path:
    """Write ``.json`` as a JSON document, anything else in the binary form."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(model_to_json(params, schema), sort_keys=True))
    else:
        path.write_bytes(dumps_model(params, schema))
    return path


def load_model(path) -> tuple[ModelParams, dict | None]:
    path = Path(path)
    if path.suffix == ".json":
        return model_from_json(json.loads(path.read_text()))
    return loads_model(path.read_bytes())
