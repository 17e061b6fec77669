import gzip
import json

import numpy as np
import pytest

from conftest import naive_attribution, random_logs
from mtfwfm import data
from mtfwfm.data import DAY, ConversionRecord, ImpressionRecord, LabeledImpression, PipelineConfig
from mtfwfm.errors import DataError, SchemaError
from mtfwfm.schema import FieldSchema, InstanceSet

LINES = {"L": "Lead"}


def imp(ts, user="u", line="L", **fields):
    return ImpressionRecord(ts, user, line, {k: str(v) for k, v in fields.items()})


def labels_of(result):
    return [r.label for r in result.labeled]


@pytest.mark.parametrize("delay_days, label", [(3, 1), (7, 0)])
def test_window_examples(delay_days, label):
    res = data.attribute([imp(0)], [ConversionRecord(delay_days * DAY, "u", "L", "Lead")], LINES, 6)
    assert labels_of(res) == [label]
    assert res.unmatched == 1 - label


def test_window_boundaries():
    window = 6 * DAY
    at = data.attribute([imp(100)], [ConversionRecord(100 + window, "u", "L", "Lead")], LINES, 6)
    past = data.attribute([imp(100)], [ConversionRecord(100 + window + 1, "u", "L", "Lead")], LINES, 6)
    before = data.attribute([imp(100)], [ConversionRecord(99, "u", "L", "Lead")], LINES, 6)
    assert labels_of(at) == [1]
    assert labels_of(past) == [0]
    assert labels_of(before) == [0]


def test_last_touch_only():
    res = data.attribute([imp(0), imp(2 * DAY)], [ConversionRecord(3 * DAY, "u", "L", "Lead")], LINES, 6)
    assert labels_of(res) == [0, 1]
    assert res.labeled[1].conversion_ts == 3 * DAY


def test_positive_once_and_other_keys_untouched():
    imps = [imp(0), imp(0, user="v")]
    convs = [ConversionRecord(DAY, "u", "L", "Lead"), ConversionRecord(2 * DAY, "u", "L", "Lead")]
    res = data.attribute(imps, convs, LINES, 6)
    assert labels_of(res) == [1, 0]
    assert (res.matched, res.recredited, res.unmatched) == (2, 1, 0)


def test_unknown_line_is_an_error():
    with pytest.raises(DataError):
        data.attribute([imp(0, line="X")], [], LINES, 6)


def test_matches_double_loop_oracle(rng):
    for _ in range(20):
        imps, convs, line_types = random_logs(rng, int(rng.integers(50, 400)), int(rng.integers(10, 150)))
        res = data.attribute(imps, convs, line_types, 6)
        want = naive_attribution(imps, convs, 6)
        got = {i: r.conv_type for i, r in enumerate(res.labeled) if r.label}
        assert got == want
        for i, r in enumerate(res.labeled):
            if r.label:
                assert r.impression.timestamp <= r.conversion_ts <= r.impression.timestamp + 6 * DAY
            else:
                assert r.conv_type == line_types[r.impression.line_id]


def labeled_set(n_pos, n_neg):
    return [LabeledImpression(imp(0), 1, "Lead") for _ in range(n_pos)] + \
           [LabeledImpression(imp(0), 0, "Lead") for _ in range(n_neg)]


def test_downsampling():
    recs = labeled_set(50, 100_000)
    assert data.downsample_negatives(recs, 1.0, 0) == recs
    kept = data.downsample_negatives(recs, 0.5, 3)
    negatives = sum(1 for r in kept if r.label == 0)
    assert sum(r.label for r in kept) == 50
    assert abs(negatives - 50_000) <= 3 * np.sqrt(100_000 * 0.25)
    assert kept == data.downsample_negatives(recs, 0.5, 3)
    by_type = data.downsample_negatives(recs, 1.0, 3, per_type_keep={"Lead": 0.1})
    assert len(by_type) < 0.2 * len(recs)
    with pytest.raises(DataError):
        data.downsample_negatives(recs, 0.0, 0)


def test_prepare_splits_and_eval_not_downsampled(rng):
    imps = [imp(d * DAY + 10 * k, user=f"u{k}", A=k % 3, B=k % 2) for d in range(9) for k in range(200)]
    out = data.prepare(imps, [], LINES, PipelineConfig(fields=["A", "B"], downsample=0.25, seed=1))
    assert len(out.splits["val"]) == len(out.splits["test"]) == 200
    assert len(out.splits["train"]) < 0.4 * 1400
    assert set(out.stats["splits"]) == {"train", "val", "test"}


def test_split_hygiene():
    recs = [LabeledImpression(imp(d * DAY + 5), 0, "Lead") for d in range(10)]
    parts = data.split_by_day(recs, PipelineConfig())
    assert [r.day for r in parts["train"]] == list(range(7))
    assert [r.day for r in parts["val"]] == [7] and [r.day for r in parts["test"]] == [8]
    with pytest.raises(DataError):
        PipelineConfig(train_days=(0, 8), val_days=(7, 8))


def test_encoding_dictionary_and_oov():
    train = [LabeledImpression(imp(0, A="x", B="p"), 0, "Lead"), LabeledImpression(imp(0, A="x", B="q"), 1, "Buy"),
             LabeledImpression(imp(0, A="y", B="p"), 0, "Lead")]
    schema = data.build_schema(train, ["A", "B"], ["Lead", "Buy"], min_freq=2)
    assert schema.feature_dict == [{"x": 1}, {"p": 3}]
    enc = data.encode(train, schema)
    assert enc.X.tolist() == [[1, 3], [1, 2], [0, 3]]
    val = data.encode([LabeledImpression(imp(0, A="x", B="zzz"), 0, "Buy")], schema)
    assert val.X.tolist() == [[1, schema.oov_index[1]]]
    ctf = data.augment_ctf(val, schema)
    assert ctf.X[0, -1] == schema.num_features + 1
    missing = data.encode([LabeledImpression(imp(0, A="x"), 0, "Lead")], schema)
    assert missing.X[0, 1] == schema.oov_index[1]
    with pytest.raises(DataError):
        data.build_schema(train, ["A", "Nope"], ["Lead"])
    with pytest.raises(DataError):
        data.encode([LabeledImpression(imp(0, A="x", B="p"), 0, "Other")], schema)


def test_schema_validation_and_json():
    schema = FieldSchema.build(["A", "B"], [["a", "b"], ["c"]], ["Lead"])
    assert schema.field_sizes == (3, 2)
    assert FieldSchema.from_json(json.loads(json.dumps(schema.to_json()))) == schema
    with pytest.raises(SchemaError):
        FieldSchema(["A"], [{"a": 0}], [0])
    with pytest.raises(SchemaError):
        schema.check_aligned(np.array([[3, 0]]))


def test_binary_instances_roundtrip(tmp_path):
    schema = FieldSchema.build(["A", "B"], [["a", "b"], ["c"]], ["Lead", "Buy"])
    inst = InstanceSet(np.array([[1, 4], [2, 3]]), np.array([0, 1]), np.array([1.0, 0.0]))
    data.write_instances(tmp_path / "x.bin", inst, schema)
    back, sid = data.read_instances(tmp_path / "x.bin")
    assert sid == schema.schema_id()
    assert np.array_equal(back.X, inst.X) and np.array_equal(back.conv_type, inst.conv_type)
    assert np.array_equal(back.label, inst.label)
    raw = (tmp_path / "x.bin").read_bytes()
    assert len(raw) == 22 + 2 * (2 * 4 + 2)
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(DataError):
        data.read_instances(tmp_path / "bad.bin")
    data.write_schema(tmp_path / "s.json", schema)
    assert data.read_schema(tmp_path / "s.json") == schema


@pytest.mark.parametrize("name", ["logs.ndjson", "logs.ndjson.gz"])
def test_log_files_roundtrip(name, tmp_path, rng):
    imps, convs, _ = random_logs(rng, 30, 10)
    data.write_ndjson(tmp_path / name, imps)
    assert data.read_impressions(tmp_path / name) == imps
    data.write_ndjson(tmp_path / ("c" + name), convs)
    assert data.read_conversions(tmp_path / ("c" + name)) == convs
    if name.endswith(".gz"):
        first = (tmp_path / name).read_bytes()
        data.write_ndjson(tmp_path / name, imps)
        assert (tmp_path / name).read_bytes() == first
        with gzip.open(tmp_path / name, "rt") as fh:
            assert json.loads(fh.readline())["user_id"] == imps[0].user_id


def test_csv_impressions_and_missing_fields(tmp_path):
    recs = [imp(5, A="x"), imp(6, B="y")]
    data.write_impressions_csv(tmp_path / "i.csv", recs, ["A", "B"])
    back = data.read_impressions(tmp_path / "i.csv")
    assert back[0].field_values == {"A": "x", "B": "__missing__"}
    (tmp_path / "i.ndjson").write_text('{"timestamp": 1, "user_id": "u", "line_id": "L", "fields": {"A": "x"}}\n')
    assert data.read_impressions(tmp_path / "i.ndjson", ["A", "B"])[0].field_values["B"] == "__missing__"
    (tmp_path / "bad.ndjson").write_text('{"user_id": "u"}\n')
    with pytest.raises(DataError):
        data.read_impressions(tmp_path / "bad.ndjson")
    with pytest.raises(DataError):
        ConversionRecord(-1, "u", "L", "Lead")
