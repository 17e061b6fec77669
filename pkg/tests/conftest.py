import numpy as np
import pytest

from mtfwfm.model import ModelConfig, ModelKind, ModelParams
from mtfwfm.schema import InstanceSet

ALL_KINDS = list(ModelKind)


def make_config(kind, sizes, T, K, weighted_pairs=True) -> ModelConfig:
    sizes = list(sizes)
    return ModelConfig(kind, len(sizes), sum(sizes), T, K, field_sizes=sizes, ctf3_weighted_pairs=weighted_pairs)


def random_params(config: ModelConfig, rng, scale=0.5) -> ModelParams:
    p = ModelParams.zeros(config)
    p.bias[:] = rng.normal(0, scale, p.bias.shape)
    p.embeddings[:] = rng.normal(0, scale, p.embeddings.shape)
    p.main_weights[:] = rng.normal(0, scale, p.main_weights.shape)
    if p.interaction_weights is not None:
        r = rng.normal(0, scale, p.interaction_weights.shape)
        r = (r + r.transpose(0, 2, 1)) / 2
        p.interaction_weights[:] = r * p.mask
    return p


def random_instances(config: ModelConfig, n, rng, labels=True) -> InstanceSet:
    offsets = np.concatenate([[0], np.cumsum(config.field_sizes)[:-1]])
    X = np.stack([o + rng.integers(0, s, n) for o, s in zip(offsets, config.field_sizes)], axis=1)
    t = rng.integers(0, config.num_types, n)
    y = rng.integers(0, 2, n).astype(float) if labels else np.zeros(n)
    return InstanceSet(X, t, y, np.ones(n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def free_coordinates(params: ModelParams):
    """Yield (tensor name, list of tied entries) for every free scalar parameter."""
    for name, arr in params.tensors().items():
        if name == "interaction_weights":
            for t in range(arr.shape[0]):
                for p, q in zip(*np.nonzero(np.triu(params.mask, 1))):
                    yield name, [(t, p, q), (t, q, p)]
        else:
            for idx in np.ndindex(arr.shape):
                yield name, [idx]


def fd_relative_errors(params: ModelParams, batch, tconfig, h=1e-6, floor=1e-3) -> np.ndarray:
    """Relative error |a - n| / max(|a|, |n|, floor) of the analytic gradient per free coordinate.

    The floor keeps rounding noise in the central difference (about eps * loss / h,
    near 1e-9 here) from dominating coordinates whose gradient is itself tiny.
    """
    from mtfwfm.trainer import gradients, loss

    dense = gradients(params, batch, tconfig).dense(params.config)
    errs = []
    for name, entries in free_coordinates(params):
        arr = params.tensors()[name]
        orig = arr[entries[0]]
        for e in entries:
            arr[e] = orig + h
        up = loss(params, batch, tconfig)
        for e in entries:
            arr[e] = orig - h
        down = loss(params, batch, tconfig)
        for e in entries:
            arr[e] = orig
        numeric = (up - down) / (2 * h)
        analytic = dense[name][entries[0]]
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return np.asarray(errs)


def brute_mi(X, types, labels, t, p, q) -> float:
    """Triple-loop plug-in MI (natural log) of the (p, q) field pair with the label among type-t rows."""
    rows = [i for i in range(len(types)) if types[i] == t]
    n = len(rows)
    joint, pair, lab = {}, {}, {}
    for i in rows:
        a, b, y = int(X[i][p]), int(X[i][q]), int(labels[i])
        joint[(a, b, y)] = joint.get((a, b, y), 0) + 1
        pair[(a, b)] = pair.get((a, b), 0) + 1
        lab[y] = lab.get(y, 0) + 1
    total = 0.0
    for (a, b, y), c in joint.items():
        total += (c / n) * np.log((c / n) / ((pair[(a, b)] / n) * (lab[y] / n)))
    return total


def random_mi_dataset(rng, n, cards, T):
    offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
    X = np.stack([o + rng.integers(0, c, n) for o, c in zip(offsets, cards)], axis=1)
    types = rng.integers(0, T, n)
    # labels depend on the first field pair so MI values are not all near zero
    logits = np.sin(X[:, 0] * 1.7 + X[:, 1 % len(cards)] * 0.9 + types)
    labels = (rng.random(n) < 1 / (1 + np.exp(-2 * logits))).astype(float)
    return InstanceSet(X, types, labels), int(sum(cards))


def naive_attribution(impressions, conversions, window_days):
    """Double-loop last-touch oracle; returns {impression index: (label, conv type)} for positives."""
    window = window_days * 86_400
    positive = {}
    for j in sorted(range(len(conversions)), key=lambda j: (conversions[j].timestamp, j)):
        c = conversions[j]
        best = None
        for i, imp in enumerate(impressions):
            if imp.user_id == c.user_id and imp.line_id == c.line_id and imp.timestamp <= c.timestamp:
                if best is None or (imp.timestamp, i) > (impressions[best].timestamp, best):
                    best = i
        if best is not None and c.timestamp <= impressions[best].timestamp + window and best not in positive:
            positive[best] = c.conv_type
    return positive


def random_logs(rng, n_imp, n_conv, span_days=10, users=15, lines=4):
    from mtfwfm.data import ConversionRecord, ImpressionRecord

    line_types = {f"L{k}": ("Lead", "Purchase")[k % 2] for k in range(lines)}
    imps = [ImpressionRecord(int(rng.integers(0, span_days * 86_400) // 3600 * 3600), f"u{rng.integers(users)}",
                             f"L{rng.integers(lines)}", {"A": str(rng.integers(5))}) for _ in range(n_imp)]
    convs = []
    for _ in range(n_conv):
        src = imps[rng.integers(n_imp)]
        ts = src.timestamp + int(rng.integers(0, 9 * 86_400) // 3600 * 3600)
        convs.append(ConversionRecord(ts, src.user_id, src.line_id, line_types[src.line_id]))
    return imps, convs, line_types
