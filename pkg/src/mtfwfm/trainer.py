"""Joint mini-batch SGD training with log loss and L2 regularization.

Shared embeddings receive gradient from every sample; bias, main and
interaction weights of task row t only from samples routed to that row.
The regularizer covers the parameters a batch touches (embedding rows of
its active features, task rows of its conversion types), which keeps the
batch objective, its gradient and the sparse update consistent.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import metrics
from .errors import AucUndefinedError, DataError, DivergenceError, EmptyBatchError, SchemaError
from .model import PROB_EPS, ForwardCache, ModelConfig, ModelKind, ModelParams, forward, prepare_inputs, sigmoid
from .schema import InstanceSet

log = logging.getLogger(__name__)


class RegKind(str, enum.Enum):
    L2_ALL = "l2_all"
    L2_EMBED_ONLY = "l2_embed_only"
    NONE = "none"


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    reg_lambda: float = 1e-4
    reg_kind: RegKind = RegKind.L2_ALL
    batch_size: int = 256
    max_epochs: int = 10
    seed: int = 0
    init_scale: float = 0.05
    deterministic: bool = True
    early_stop_patience: int = 0
    sample_with_replacement: bool = False
    threads: int = 1
    freeze_embeddings: bool = False  # test-only switch

    def __post_init__(self):
        self.reg_kind = RegKind(self.reg_kind)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.reg_lambda < 0 or self.init_scale < 0 or self.early_stop_patience < 0:
            raise ValueError("reg_lambda, init_scale and early_stop_patience must be nonnegative")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["reg_kind"] = self.reg_kind.value
        return d


@dataclass
class GradientBuffer:
    """Gradients keyed by the touched indices.

    ``emb_rows`` are the (sorted, unique) embedding rows and ``embeddings``
    their gradient rows; ``task_rows`` the task rows present in the batch.
    Dense bias/main/interaction arrays have exact zeros for other rows.
    """

    emb_rows: np.ndarray
    embeddings: np.ndarray
    task_rows: np.ndarray
    bias: np.ndarray
    main_weights: np.ndarray
    interaction_weights: np.ndarray | None

    def dense(self, config: ModelConfig) -> dict[str, np.ndarray]:
        emb = np.zeros((config.model_features, config.embed_dim))
        emb[self.emb_rows] = self.embeddings
        out = {"bias": self.bias, "embeddings": emb, "main_weights": self.main_weights}
        if self.interaction_weights is not None:
            out["interaction_weights"] = self.interaction_weights
        return out


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def init_params(config: ModelConfig, train: TrainConfig) -> ModelParams:
    """Uniform(-s, s) embeddings and main weights; zero bias and interaction weights."""
    rng = np.random.default_rng(np.random.SeedSequence(train.seed).spawn(1)[0])
    p = ModelParams.zeros(config)
    s = train.init_scale
    p.embeddings[:] = rng.uniform(-s, s, p.embeddings.shape)
    p.main_weights[:] = rng.uniform(-s, s, p.main_weights.shape)
    return p


def _as_batch(params: ModelParams, batch) -> tuple[ForwardCache, np.ndarray, np.ndarray]:
    if isinstance(batch, InstanceSet):
        data = batch
    else:
        data = InstanceSet.from_instances(list(batch))
    if len(data) == 0:
        raise EmptyBatchError("batch is empty")
    cache = forward(params, data.X, data.conv_type)
    return cache, data.label, data.weight


def _probs(phi: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(phi), PROB_EPS, 1.0 - PROB_EPS)


def _data_loss(phi, y, w) -> float:
    p = _probs(phi)
    return float(np.sum(w * -(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def _reg_groups(train: TrainConfig) -> tuple[bool, bool]:
    """(regularize embeddings, regularize main+interaction weights)."""
    if train.reg_lambda == 0 or train.reg_kind is RegKind.NONE:
        return False, False
    return True, train.reg_kind is RegKind.L2_ALL


def _reg_value(params: ModelParams, emb_rows, task_rows, train: TrainConfig) -> float:
    reg_emb, reg_rest = _reg_groups(train)
    total = 0.0
    if reg_emb:
        total += float(np.sum(params.embeddings[emb_rows] ** 2))
    if reg_rest:
        total += float(np.sum(params.main_weights[task_rows] ** 2))
        if params.mask is not None:
            upper = np.triu(params.mask, 1)
            total += float(np.sum(params.interaction_weights[task_rows][:, upper] ** 2))
    return train.reg_lambda * total


def loss(params: ModelParams, batch, train: TrainConfig) -> float:
    """Summed (instance-weighted) log loss over the batch plus lambda * Omega."""
    cache, y, w = _as_batch(params, batch)
    emb_rows = np.unique(cache.X)
    task_rows = np.unique(cache.rows)
    return _data_loss(cache.phi, y, w) + _reg_value(params, emb_rows, task_rows, train)


def _data_gradients(params: ModelParams, cache: ForwardCache, y, w) -> GradientBuffer:
    c = params.config
    X, rows, V, W, R, G, H, R3, phi = cache
    g = w * (sigmoid(phi) - y)
    P = c.task_rows
    task_rows = np.unique(rows)

    gb = np.bincount(rows, weights=g, minlength=P).astype(np.float64)

    gV = g[:, None, None] * V
    gm = np.zeros_like(params.main_weights)
    gr = None
    if params.mask is not None:
        D = np.zeros_like(G)
        if c.kind is not ModelKind.FWFM_CTF3 or c.ctf3_weighted_pairs:
            D += G
        if H is not None:
            D[:, :c.num_fields, :c.num_fields] += H
        D *= params.mask
        D *= g[:, None, None]
        gr = np.zeros_like(params.interaction_weights)
    for r in task_rows:
        sel = rows == r
        gm[r] = gV[sel].sum(axis=0)
        if gr is not None:
            gr[r] = D[sel].sum(axis=0)

    # d phi / d v_i = w_F(i) + sum_j r_F(i)F(j) v_j (+ 3-way terms)
    dV = W + R @ V
    if H is not None:
        n = c.num_fields
        Vb, vt = V[:, :n], V[:, n]
        RVb = R3 @ Vb
        dV[:, :n] += RVb * vt[:, None, :]
        dV[:, n] += 0.5 * (Vb * RVb).sum(axis=1)
    dV *= g[:, None, None]
    emb_rows, inv = np.unique(X.ravel(), return_inverse=True)
    ge = np.zeros((emb_rows.size, c.embed_dim))
    np.add.at(ge, inv, dV.reshape(-1, c.embed_dim))
    return GradientBuffer(emb_rows, ge, task_rows, gb, gm, gr)


def _merge(a: GradientBuffer, b: GradientBuffer) -> GradientBuffer:
    emb_rows, inv = np.unique(np.concatenate([a.emb_rows, b.emb_rows]), return_inverse=True)
    ge = np.zeros((emb_rows.size, a.embeddings.shape[1]))
    np.add.at(ge, inv, np.concatenate([a.embeddings, b.embeddings]))
    gr = None if a.interaction_weights is None else a.interaction_weights + b.interaction_weights
    return GradientBuffer(emb_rows, ge, np.union1d(a.task_rows, b.task_rows),
                          a.bias + b.bias, a.main_weights + b.main_weights, gr)


def _parallel_gradients(params, X, types, y, w, threads: int) -> GradientBuffer:
    chunks = np.array_split(np.arange(X.shape[0]), threads)
    chunks = [ch for ch in chunks if ch.size]

    def work(idx):
        return _data_gradients(params, forward(params, X[idx], types[idx], validate=False), y[idx], w[idx])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, chunks))
    # fixed-order pairwise tree reduction
    while len(parts) > 1:
        nxt = [_merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _add_reg_gradients(params: ModelParams, grads: GradientBuffer, train: TrainConfig) -> None:
    reg_emb, reg_rest = _reg_groups(train)
    lam2 = 2.0 * train.reg_lambda
    if reg_emb:
        grads.embeddings += lam2 * params.embeddings[grads.emb_rows]
    if reg_rest:
        rows = grads.task_rows
        grads.main_weights[rows] += lam2 * params.main_weights[rows]
        if grads.interaction_weights is not None:
            grads.interaction_weights[rows] += lam2 * params.interaction_weights[rows] * params.mask


def gradients(params: ModelParams, batch, train: TrainConfig) -> GradientBuffer:
    """Analytic gradient of :func:`loss` with respect to every free parameter."""
    cache, y, w = _as_batch(params, batch)
    grads = _data_gradients(params, cache, y, w)
    _add_reg_gradients(params, grads, train)
    return grads


def sgd_step(params: ModelParams, grads: GradientBuffer, train: TrainConfig,
             learning_rate: float | None = None) -> ModelParams:
    """In-place ``theta -= lr * grad`` on touched entries; returns ``params``.

    ``learning_rate`` overrides ``train.learning_rate`` (zero is allowed here).
    """
    if (grads.bias.shape != params.bias.shape or grads.main_weights.shape != params.main_weights.shape
            or grads.embeddings.shape[1:] != params.embeddings.shape[1:]
            or (grads.interaction_weights is None) != (params.interaction_weights is None)
            or (grads.interaction_weights is not None
                and grads.interaction_weights.shape != params.interaction_weights.shape)):
        raise SchemaError("gradient buffer does not match parameter shapes")
    lr = train.learning_rate if learning_rate is None else learning_rate
    rows = grads.task_rows
    params.bias[rows] -= lr * grads.bias[rows]
    params.main_weights[rows] -= lr * grads.main_weights[rows]
    if params.interaction_weights is not None:
        # masked entries (diagonal, unused pairs) have zero gradient by construction
        params.interaction_weights[rows] -= lr * grads.interaction_weights[rows]
    if not train.freeze_embeddings:
        params.embeddings[grads.emb_rows] -= lr * grads.embeddings
    return params


def _evaluate(params: ModelParams, val: InstanceSet, weights) -> dict:
    try:
        rep = metrics.report(forward(params, val.X, val.conv_type).phi, val.label, val.conv_type, weights)
    except AucUndefinedError:
        return {"val_auc_overall": None, "val_auc_per_type": {}, "val_auc_weighted": None}
    return {
        "val_auc_overall": rep.auc_overall,
        "val_auc_per_type": {str(t): a for t, a in sorted(rep.auc_per_type.items())},
        "val_auc_weighted": rep.auc_weighted,
    }


def train(
    dataset: InstanceSet,
    val: InstanceSet | None,
    mconfig: ModelConfig,
    tconfig: TrainConfig,
    *,
    type_weights: Mapping[int, float] | None = None,
    log_path=None,
    on_epoch: Callable[[int, ModelParams, dict], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Run epochs of shuffled mini-batches and keep the best validation epoch.

    Without a validation set (or when its weighted AUC is undefined) the last
    epoch's parameters are returned.
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    dataset.check_types(mconfig.num_types)
    params = init_params(mconfig, tconfig)
    X, _ = prepare_inputs(params, dataset.X, dataset.conv_type)
    types, y, w = dataset.conv_type, dataset.label, dataset.weight
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence(tconfig.seed).spawn(2)[1])
    parallel = tconfig.threads > 1 and not tconfig.deterministic

    tlog = TrainLog()
    best_params, best_score, since_best = None, -math.inf, 0
    logf = open(log_path, "w") if log_path is not None else None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(1, tconfig.max_epochs + 1):
                t0 = time.perf_counter()
                order = rng.integers(0, n, n) if tconfig.sample_with_replacement else rng.permutation(n)
                total = 0.0
                for start in range(0, n, tconfig.batch_size):
                    idx = order[start:start + tconfig.batch_size]
                    bx, bt, by, bw = X[idx], types[idx], y[idx], w[idx]
                    cache = forward(params, bx, bt, validate=False)
                    emb_rows = np.unique(bx)
                    batch_loss = _data_loss(cache.phi, by, bw) + _reg_value(params, emb_rows, np.unique(cache.rows), tconfig)
                    if not math.isfinite(batch_loss):
                        raise DivergenceError(epoch)
                    total += batch_loss
                    if parallel:
                        grads = _parallel_gradients(params, bx, bt, by, bw, tconfig.threads)
                    else:
                        grads = _data_gradients(params, cache, by, bw)
                    _add_reg_gradients(params, grads, tconfig)
                    sgd_step(params, grads, tconfig)
                if not all(np.isfinite(a).all() for a in params.tensors().values()):
                    raise DivergenceError(epoch)
                rec = {"epoch": epoch, "train_loss": total / n}
                if val is not None and len(val):
                    rec.update(_evaluate(params, val, type_weights))
                else:
                    rec.update({"val_auc_overall": None, "val_auc_per_type": {}, "val_auc_weighted": None})
                rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
                tlog.records.append(rec)
                if logf:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    logf.flush()
                log.info("epoch %d loss %.5f val wAUC %s", epoch, rec["train_loss"], rec["val_auc_weighted"])
                if on_epoch is not None:
                    on_epoch(epoch, params, rec)

                score = rec["val_auc_weighted"]
                if score is None:
                    continue
                if score > best_score:
                    best_score, best_params, since_best = score, params.copy(), 0
                    tlog.best_epoch = epoch
                else:
                    since_best += 1
                    if tconfig.early_stop_patience and since_best >= tconfig.early_stop_patience:
                        break
    finally:
        if logf:
            logf.close()
    if best_params is None:
        tlog.best_epoch = tlog.records[-1]["epoch"]
        return params, tlog
    return best_params, tlog


def read_train_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
