import math

import mpmath
import numpy as np
import pytest

from conftest import ALL_KINDS, fd_relative_errors, make_config, random_instances, random_params
from mtfwfm.errors import DataError, DivergenceError, EmptyBatchError, SchemaError
from mtfwfm.model import ModelKind, ModelParams, score
from mtfwfm.schema import InstanceSet, SparseInstance
from mtfwfm.trainer import (
    GradientBuffer, TrainConfig, _add_reg_gradients, gradients, init_params, loss, read_train_log, sgd_step, train,
)

MT = ModelKind.MT_FWFM


def zero_buffer(params):
    c = params.config
    r = None if params.interaction_weights is None else np.zeros_like(params.interaction_weights)
    return GradientBuffer(np.arange(c.model_features), np.zeros_like(params.embeddings), np.arange(c.task_rows),
                          np.zeros_like(params.bias), np.zeros_like(params.main_weights), r)


def toy_separable(n=400, seed=0):
    """Two fields of two values each; label = value(field 0) XOR value(field 1)."""
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, n), rng.integers(0, 2, n)
    X = np.stack([a, 2 + b], axis=1)
    return InstanceSet(X, np.zeros(n, dtype=np.int64), (a ^ b).astype(float))


# -- init ----------------------------------------------------------------------

def test_init_seeded():
    cfg = make_config(MT, [3, 4], 2, 3)
    a, b = init_params(cfg, TrainConfig(seed=7)), init_params(cfg, TrainConfig(seed=7))
    assert a.equal(b)
    assert not a.equal(init_params(cfg, TrainConfig(seed=8)))


def test_init_scale_zero_gives_zero_scores(rng):
    cfg = make_config(MT, [3, 4], 2, 3)
    p = init_params(cfg, TrainConfig(init_scale=0.0))
    assert not p.embeddings.any()
    assert np.all(score(p, random_instances(cfg, 10, rng)) == 0)


# -- loss ----------------------------------------------------------------------

def test_loss_at_half_is_ln2(rng):
    cfg = make_config(MT, [3, 4], 2, 3)
    batch = random_instances(cfg, 10, rng)
    assert loss(ModelParams.zeros(cfg), batch, TrainConfig(reg_lambda=0)) == pytest.approx(10 * math.log(2), rel=1e-14)
    assert loss(ModelParams.zeros(cfg), batch, TrainConfig(reg_lambda=0.5)) == pytest.approx(10 * math.log(2), rel=1e-14)


def test_loss_single_positive():
    p = ModelParams.zeros(make_config(MT, [1, 1], 1, 2))
    p.bias[0] = 1.5
    mpmath.mp.dps = 50
    want = float(-mpmath.log(1 / (1 + mpmath.exp(-1.5))))
    got = loss(p, [SparseInstance(np.array([0, 1]), 0, 1)], TrainConfig(reg_lambda=0))
    assert got == pytest.approx(want, rel=1e-13)
    assert got == pytest.approx(0.2014, abs=5e-5)


def test_empty_batch():
    p = ModelParams.zeros(make_config(MT, [1, 1], 1, 2))
    with pytest.raises(EmptyBatchError):
        loss(p, [], TrainConfig())
    with pytest.raises(EmptyBatchError):
        gradients(p, [], TrainConfig())


# -- gradients -----------------------------------------------------------------

def test_zero_params_gradient():
    cfg = make_config(MT, [2, 2], 2, 2)
    g = gradients(ModelParams.zeros(cfg), [SparseInstance(np.array([0, 2]), 1, 1)], TrainConfig()).dense(cfg)
    assert g["bias"].tolist() == [0.0, -0.5]
    for name in ("embeddings", "main_weights", "interaction_weights"):
        assert not g[name].any()


def test_type_masking(rng):
    cfg = make_config(MT, [3, 2, 2], 3, 2)
    batch = random_instances(cfg, 40, rng)
    batch = batch.subset(np.nonzero(batch.conv_type == 0)[0])
    g = gradients(random_params(cfg, rng), batch, TrainConfig(reg_lambda=0.1))
    for arr in (g.bias, g.main_weights, g.interaction_weights):
        assert not arr[1:].any()
        assert arr[0].any()
    assert g.task_rows.tolist() == [0]


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("reg_kind", ["l2_all", "l2_embed_only", "none"])
def test_gradient_matches_finite_differences(kind, reg_kind, rng):
    cfg = make_config(kind, [2, 3, 2], 3, 3)
    errs = fd_relative_errors(random_params(cfg, rng), random_instances(cfg, 12, rng),
                              TrainConfig(reg_lambda=0.05, reg_kind=reg_kind))
    assert errs.max() < 1e-5


def test_instance_weights_scale_gradient(rng):
    cfg = make_config(MT, [2, 3], 2, 2)
    p = random_params(cfg, rng)
    batch = random_instances(cfg, 6, rng)
    heavy = InstanceSet(batch.X, batch.conv_type, batch.label, np.full(6, 3.0))
    tc = TrainConfig(reg_lambda=0)
    np.testing.assert_allclose(gradients(p, heavy, tc).bias, 3 * gradients(p, batch, tc).bias, rtol=1e-13)


# -- sgd -----------------------------------------------------------------------

def test_sgd_zero_gradient_and_zero_rate(rng):
    cfg = make_config(ModelKind.FWFM_CTF3, [2, 3], 2, 2)
    p = random_params(cfg, rng)
    before = p.copy()
    sgd_step(p, zero_buffer(p), TrainConfig())
    assert p.equal(before)
    sgd_step(p, gradients(p, random_instances(cfg, 5, rng), TrainConfig()), TrainConfig(), learning_rate=0.0)
    assert p.equal(before)


def test_sgd_scalar_arithmetic():
    cfg = make_config(MT, [1, 1], 1, 1)
    p = ModelParams.zeros(cfg)
    p.bias[0] = 1.0
    g = zero_buffer(p)
    g.bias[0] = 2.0
    sgd_step(p, g, TrainConfig(learning_rate=0.1))
    assert p.bias[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_shape_mismatch():
    p = ModelParams.zeros(make_config(MT, [1, 1], 1, 1))
    q = ModelParams.zeros(make_config(MT, [1, 1], 2, 1))
    with pytest.raises(SchemaError):
        sgd_step(p, zero_buffer(q), TrainConfig())


def test_sgd_keeps_fixed_entries(rng):
    cfg = make_config(ModelKind.FWFM_CTF3, [2, 2, 2], 2, 2, weighted_pairs=False)
    p = random_params(cfg, rng)
    sgd_step(p, gradients(p, random_instances(cfg, 20, rng), TrainConfig()), TrainConfig(learning_rate=0.5))
    assert not p.interaction_weights[:, ~p.mask].any()


def test_full_batch_step_decreases_loss(rng):
    for kind in ALL_KINDS:
        cfg = make_config(kind, [3, 3, 2], 2, 3)
        p = random_params(cfg, rng)
        batch = random_instances(cfg, 64, rng)
        tc = TrainConfig(learning_rate=1e-3)
        before = loss(p, batch, tc)
        sgd_step(p, gradients(p, batch, tc), tc)
        assert loss(p, batch, tc) - before <= 0


def test_regularization_pull(rng):
    cfg = make_config(MT, [3, 3], 2, 3)
    p = random_params(cfg, rng)
    before = p.copy()
    tc = TrainConfig(reg_lambda=0.1, learning_rate=0.1)
    g = zero_buffer(p)
    _add_reg_gradients(p, g, tc)
    sgd_step(p, g, tc)
    for name in ("embeddings", "main_weights", "interaction_weights"):
        assert np.linalg.norm(p.tensors()[name]) < np.linalg.norm(before.tensors()[name])
    assert np.array_equal(p.bias, before.bias)


# -- train ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", [ModelKind.FWFM_CTF2, MT])
def test_separable_toy_descends(kind, tmp_path):
    data = toy_separable()
    cfg = make_config(kind, [2, 2], 1, 4)
    _, log = train(data, None, cfg, TrainConfig(learning_rate=0.05, max_epochs=50, batch_size=16, init_scale=0.3),
                   log_path=tmp_path / "log.ndjson")
    assert log.records[-1]["train_loss"] < log.records[0]["train_loss"]
    recs = read_train_log(tmp_path / "log.ndjson")
    assert len(recs) == 50
    assert set(recs[0]) == {"epoch", "train_loss", "val_auc_overall", "val_auc_per_type", "val_auc_weighted", "wall_ms"}


def test_train_deterministic(rng):
    cfg = make_config(MT, [4, 3, 5], 2, 3)
    data, val = random_instances(cfg, 300, rng), random_instances(cfg, 100, rng)
    tc = TrainConfig(max_epochs=3, seed=11)
    a, la = train(data, val, cfg, tc)
    b, lb = train(data, val, cfg, tc)
    assert a.equal(b)
    assert la.best_epoch == lb.best_epoch


def test_parallel_accumulation_close_to_serial(rng):
    cfg = make_config(ModelKind.FWFM_CTF3, [4, 3, 5], 2, 3)
    data = random_instances(cfg, 300, rng)
    a, _ = train(data, None, cfg, TrainConfig(max_epochs=2, batch_size=64))
    b, _ = train(data, None, cfg, TrainConfig(max_epochs=2, batch_size=64, threads=3, deterministic=False))
    for k, v in a.tensors().items():
        np.testing.assert_allclose(b.tensors()[k], v, rtol=1e-9, atol=1e-12)


def test_best_validation_epoch_is_returned(rng):
    cfg = make_config(MT, [4, 3], 2, 3)
    data, val = random_instances(cfg, 200, rng), random_instances(cfg, 200, rng)
    snapshots = {}
    params, log = train(data, val, cfg, TrainConfig(max_epochs=4), on_epoch=lambda e, p, r: snapshots.setdefault(e, p.copy()))
    best = max(log.records, key=lambda r: r["val_auc_weighted"])["epoch"]
    assert log.best_epoch == best
    assert params.equal(snapshots[best])


def test_early_stopping(rng):
    cfg = make_config(MT, [4, 3], 2, 3)
    data, val = random_instances(cfg, 200, rng), random_instances(cfg, 200, rng)
    _, log = train(data, val, cfg, TrainConfig(max_epochs=30, early_stop_patience=1, learning_rate=0.5))
    assert len(log.records) < 30


def test_sampling_with_replacement(rng):
    cfg = make_config(MT, [4, 3], 2, 3)
    _, log = train(random_instances(cfg, 100, rng), None, cfg, TrainConfig(max_epochs=2, sample_with_replacement=True))
    assert len(log.records) == 2


def test_task_isolation_with_frozen_embeddings(rng):
    cfg = make_config(MT, [4, 3, 3], 2, 3)
    data = random_instances(cfg, 300, rng)
    tc = TrainConfig(max_epochs=3, freeze_embeddings=True, batch_size=32)
    a, _ = train(data, None, cfg, tc)
    sel = np.nonzero(data.conv_type == 1)[0]
    y = data.label.copy()
    y[sel] = rng.permutation(y[sel])
    y[sel[0]] = 1 - y[sel[0]]
    b, _ = train(InstanceSet(data.X, data.conv_type, y), None, cfg, tc)
    assert np.array_equal(a.bias[0], b.bias[0])
    assert np.array_equal(a.main_weights[0], b.main_weights[0])
    assert np.array_equal(a.interaction_weights[0], b.interaction_weights[0])
    assert not np.array_equal(a.bias[1], b.bias[1])


def test_train_errors(rng):
    cfg = make_config(MT, [4, 3], 2, 3)
    empty = InstanceSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    with pytest.raises(DataError):
        train(empty, None, cfg, TrainConfig())
    with pytest.raises(DivergenceError) as info:
        train(random_instances(cfg, 100, rng), None, cfg, TrainConfig(learning_rate=1e150, init_scale=1.0))
    assert info.value.epoch >= 1
    assert f"epoch {info.value.epoch}" in str(info.value)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
