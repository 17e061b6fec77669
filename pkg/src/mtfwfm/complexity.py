"""Parameter and operation counts, instrumented forwards and inference latency.

An operation is one floating-point add or multiply; a length-K dot product
costs 2K - 1.  Sigmoid and memory traffic are not counted.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from math import comb
from typing import Sequence

import numpy as np

from .errors import SchemaError
from .model import ModelConfig, ModelKind, ModelParams, prepare_inputs
from .schema import InstanceSet


def _require(config: ModelConfig, kind: ModelKind) -> None:
    if config.kind is not kind:
        raise SchemaError(f"formula applies to {kind.value}, got {config.kind.value}")


def count_params(config: ModelConfig) -> int:
    """T + MK + NTK + N(N-1)/2 * T for MT-FwFM."""
    _require(config, ModelKind.MT_FWFM)
    T, M, N, K = config.num_types, config.num_features, config.num_fields, config.embed_dim
    return T + M * K + N * T * K + N * (N - 1) // 2 * T


@dataclass(frozen=True)
class OpCounts:
    main: int
    interaction: int
    total_formula: int   # N^2 K + N K + C(N, 2)
    component_sum: int   # main + interaction


def count_ops(config: ModelConfig) -> OpCounts:
    _require(config, ModelKind.MT_FWFM)
    N, K = config.num_fields, config.embed_dim
    pairs = comb(N, 2)
    main = N * (2 * K - 1) + (N - 1)
    inter = pairs * 2 * K + pairs - 1
    return OpCounts(main, inter, N * N * K + N * K + pairs, main + inter)


def count_ops_3way(config: ModelConfig) -> int:
    """(5/2 N^2 + 3/2 N + 2) K + C(N, 2), with N the fields excluding the type field."""
    _require(config, ModelKind.FWFM_CTF3)
    N, K = config.num_fields, config.embed_dim
    # 5N^2 + 3N + 4 is even for every N
    return (5 * N * N + 3 * N + 4) * K // 2 + comb(N, 2)


# -- counting scalar -----------------------------------------------------------------

class OpCounter:
    def __init__(self):
        self.adds = 0
        self.muls = 0

    @property
    def total(self) -> int:
        return self.adds + self.muls


class Counted:
    """Float wrapper that tallies every + and * on a shared :class:`OpCounter`."""

    __slots__ = ("value", "counter")

    def __init__(self, value: float, counter: OpCounter):
        self.value = value
        self.counter = counter

    @staticmethod
    def _v(other):
        return other.value if isinstance(other, Counted) else other

    def __add__(self, other):
        self.counter.adds += 1
        return Counted(self.value + self._v(other), self.counter)

    __radd__ = __add__

    def __mul__(self, other):
        self.counter.muls += 1
        return Counted(self.value * self._v(other), self.counter)

    __rmul__ = __mul__


def _dot(a, b):
    acc = a[0] * b[0]
    for k in range(1, len(a)):
        acc = acc + a[k] * b[k]
    return acc


def _dot3(a, b, c):
    acc = a[0] * b[0] * c[0]
    for k in range(1, len(a)):
        acc = acc + a[k] * b[k] * c[k]
    return acc


def _total(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


class ScalarModel:
    """Plain-Python per-instance forward over nested lists.

    This is the one-request serving path: no vectorization, so its cost
    tracks the operation counts.  With ``counter`` set, every parameter is a
    :class:`Counted` and :meth:`phi_sections` reports ops per section.
    """

    def __init__(self, params: ModelParams, counter: OpCounter | None = None):
        wrap = (lambda x: Counted(float(x), counter)) if counter is not None else float
        self.params = params
        self.counter = counter
        c = params.config
        self.kind = c.kind
        self.num_fields = c.num_fields
        self.bias = [wrap(b) for b in params.bias]
        self.emb = [[wrap(x) for x in row] for row in params.embeddings]
        self.main = [[[wrap(x) for x in vec] for vec in rowset] for rowset in params.main_weights]
        self.weighted = not (c.kind is ModelKind.FM_CTF2 or
                             (c.kind is ModelKind.FWFM_CTF3 and not c.ctf3_weighted_pairs))
        r = params.interaction_weights
        self.r = None if r is None else [[[wrap(x) for x in row] for row in mat] for mat in r]

    def _snap(self):
        return self.counter.total if self.counter is not None else 0

    def phi_sections(self, active: Sequence[int], row: int):
        """Return (phi, {section: op count}) for an already-prepared instance."""
        ops = {}
        V = [self.emb[i] for i in active]
        W = self.main[row]
        n = len(active)

        s0 = self._snap()
        main = _total([_dot(V[f], W[f]) for f in range(n)])
        s1 = self._snap()
        ops["main"] = s1 - s0

        terms = []
        for p in range(n):
            for q in range(p + 1, n):
                d = _dot(V[p], V[q])
                terms.append(d * self.r[row][p][q] if self.weighted else d)
        pair = _total(terms)
        s2 = self._snap()
        ops["interaction"] = s2 - s1

        parts = [self.bias[row], main, pair]
        if self.kind is ModelKind.FWFM_CTF3:
            nb = self.num_fields
            vt = V[nb]
            three = _total([_dot3(V[p], V[q], vt) * self.r[row][p][q]
                            for p in range(nb) for q in range(p + 1, nb)])
            s3 = self._snap()
            ops["three_way"] = s3 - s2
            parts.append(three)
        s4 = self._snap()
        phi = _total(parts)
        ops["combine"] = self._snap() - s4
        value = phi.value if isinstance(phi, Counted) else phi
        return value, ops

    def phi(self, active: Sequence[int], row: int) -> float:
        return self.phi_sections(active, row)[0]


def instrumented_forward(params: ModelParams, active, conv_type: int) -> tuple[float, dict[str, int]]:
    """Run one instance through a counting-scalar forward; returns (phi, op counts per section)."""
    X, rows = prepare_inputs(params, np.asarray(active)[None], [conv_type])
    model = ScalarModel(params, OpCounter())
    phi, ops = model.phi_sections(X[0].tolist(), int(rows[0]))
    ops["total"] = sum(ops.values())
    return phi, ops


# -- benchmarks --------------------------------------------------------------------

@dataclass
class LatencyStats:
    median_ns: float
    p99_ns: float
    samples: int


def bench_inference(params: ModelParams, instances: InstanceSet, reps: int = 5, warmup: int = 1) -> LatencyStats:
    """Per-inference wall time of the scalar forward, over ``reps`` passes through ``instances``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    X, rows = prepare_inputs(params, instances.X, instances.conv_type)
    model = ScalarModel(params)
    batch = [(x, int(r)) for x, r in zip(X.tolist(), rows)]
    for _ in range(warmup):
        for x, r in batch:
            model.phi(x, r)
    times = []
    clock = time.perf_counter_ns
    for _ in range(reps):
        for x, r in batch:
            t0 = clock()
            model.phi(x, r)
            times.append(clock() - t0)
    arr = np.asarray(times, dtype=np.float64)
    return LatencyStats(float(np.median(arr)), float(np.percentile(arr, 99)), arr.size)


def random_params(config: ModelConfig, rng: np.random.Generator, scale: float = 0.1) -> ModelParams:
    p = ModelParams.zeros(config)
    p.bias[:] = rng.uniform(-scale, scale, p.bias.shape)
    p.embeddings[:] = rng.uniform(-scale, scale, p.embeddings.shape)
    p.main_weights[:] = rng.uniform(-scale, scale, p.main_weights.shape)
    if p.mask is not None:
        r = rng.uniform(-scale, scale, p.interaction_weights.shape)
        p.interaction_weights[:] = np.triu(r, 1) + np.transpose(np.triu(r, 1), (0, 2, 1))
        p.interaction_weights[:, ~p.mask] = 0.0
    return p


def random_instances(config: ModelConfig, n: int, rng: np.random.Generator) -> InstanceSet:
    sizes = config.field_sizes or tuple(np.diff(np.linspace(0, config.num_features, config.num_fields + 1).astype(int)))
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    X = np.stack([off + rng.integers(0, s, n) for off, s in zip(offsets, sizes)], axis=1)
    return InstanceSet(X, rng.integers(0, config.num_types, n), np.zeros(n))


@dataclass
class ComplexityReport:
    num_fields: int
    num_features: int
    num_types: int
    embed_dim: int
    param_count_formula: int
    param_count_actual: int
    ops_main: int
    ops_interaction: int
    ops_total_formula: int
    ops_component_sum: int
    ops_total_instrumented: int
    ops_instrumented_sections: dict[str, int]
    ops_3way_formula: int
    ops_3way_instrumented: int
    ops_3way_instrumented_sections: dict[str, int]
    ops_ratio_3way_over_mt: float
    latency_mt: LatencyStats | None = None
    latency_3way: LatencyStats | None = None
    latency_ratio_3way_over_mt: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        rows = [
            ("parameters (formula)", self.param_count_formula),
            ("parameters (allocated)", self.param_count_actual),
            ("MT-FwFM ops, main", self.ops_main),
            ("MT-FwFM ops, interaction", self.ops_interaction),
            ("MT-FwFM ops, main+interaction", self.ops_component_sum),
            ("MT-FwFM ops, closed-form total", self.ops_total_formula),
            ("MT-FwFM ops, instrumented total", self.ops_total_instrumented),
            ("3-way CTF ops, formula", self.ops_3way_formula),
            ("3-way CTF ops, instrumented", self.ops_3way_instrumented),
            ("3-way / MT op ratio", f"{self.ops_ratio_3way_over_mt:.4f}"),
        ]
        if self.latency_mt is not None:
            rows += [
                ("MT-FwFM latency median (ns)", f"{self.latency_mt.median_ns:.0f}"),
                ("MT-FwFM latency p99 (ns)", f"{self.latency_mt.p99_ns:.0f}"),
                ("3-way latency median (ns)", f"{self.latency_3way.median_ns:.0f}"),
                ("3-way latency p99 (ns)", f"{self.latency_3way.p99_ns:.0f}"),
                ("3-way / MT latency ratio", f"{self.latency_ratio_3way_over_mt:.3f}"),
            ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v:>12}" for k, v in rows)


def complexity_report(
    num_fields: int = 17,
    embed_dim: int = 8,
    num_types: int = 4,
    num_features: int = 10_000,
    *,
    bench_reps: int = 0,
    bench_instances: int = 200,
    ctf3_weighted_pairs: bool = True,
    seed: int = 0,
) -> ComplexityReport:
    """Formula counts, instrumented counts and (if ``bench_reps``) measured latencies."""
    N, K, T, M = num_fields, embed_dim, num_types, num_features
    mt_cfg = ModelConfig(ModelKind.MT_FWFM, N, M, T, K)
    c3_cfg = ModelConfig(ModelKind.FWFM_CTF3, N, M, T, K, ctf3_weighted_pairs=ctf3_weighted_pairs)
    rng = np.random.default_rng(seed)
    mt = random_params(mt_cfg, rng)
    c3 = random_params(c3_cfg, rng)
    inst = random_instances(mt_cfg, max(bench_instances, 1), rng)
    _, mt_ops = instrumented_forward(mt, inst.X[0], int(inst.conv_type[0]))
    _, c3_ops = instrumented_forward(c3, inst.X[0], int(inst.conv_type[0]))
    ops = count_ops(mt_cfg)
    ops3 = count_ops_3way(c3_cfg)
    rep = ComplexityReport(
        N, M, T, K,
        param_count_formula=count_params(mt_cfg),
        param_count_actual=mt.num_free_parameters(),
        ops_main=ops.main, ops_interaction=ops.interaction,
        ops_total_formula=ops.total_formula, ops_component_sum=ops.component_sum,
        ops_total_instrumented=mt_ops["total"], ops_instrumented_sections=mt_ops,
        ops_3way_formula=ops3, ops_3way_instrumented=c3_ops["total"],
        ops_3way_instrumented_sections=c3_ops,
        ops_ratio_3way_over_mt=ops3 / ops.total_formula,
    )
    rep.notes.append("closed-form MT total = main + interaction + 2 adds combining bias, main and interaction")
    if ctf3_weighted_pairs:
        rep.notes.append("3-way instrumented count uses r-weighted 2-way pairs: formula + C(N+1, 2) multiplies")
    if bench_reps:
        rep.latency_mt = bench_inference(mt, inst, bench_reps)
        rep.latency_3way = bench_inference(c3, inst, bench_reps)
        rep.latency_ratio_3way_over_mt = rep.latency_3way.median_ns / rep.latency_mt.median_ns
    return rep
