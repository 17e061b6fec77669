"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then the flat JSON
``--config`` file, then explicit flags.  Every subcommand that writes
artifacts also writes ``resolved_config_<subcommand>.json`` to ``--out``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib.resources import files
from pathlib import Path

from . import complexity, data, metrics, mi, trainer
from .errors import DataError, DivergenceError, MtfwfmError
from .model import ModelConfig, ModelKind, ModelParams, load_model, save_model, score
from .synthetic import GenConfig, generate_synthetic, write_logs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

COMMON_DEFAULTS = {"out": None, "seed": 0, "threads": 1, "deterministic": True, "model": "mt-fwfm"}

DEFAULTS = {
    "gen-data": {"synthetic": "planted", "compress": False},
    "prepare": {
        "impressions": None, "conversions": None, "lines": None, "fields": None, "type_names": None,
        "train_days": [0, 7], "val_days": [7, 8], "test_days": [8, 9],
        "window_days": 6, "downsample": 1.0, "min_feature_freq": 2,
    },
    "train": {
        "data": None, "embed_dim": 8, "learning_rate": 0.01, "reg_lambda": 1e-4, "reg_kind": "l2_all",
        "batch_size": 256, "max_epochs": 10, "init_scale": 0.05, "early_stop_patience": 0,
        "ctf3_weighted_pairs": True, "spend_weights": None,
    },
    "eval": {"model_file": None, "data": None, "schema": None, "spend_weights": None},
    "analyze-mi": {"data": None, "schema": None, "top_k": 5, "max_cells": None},
    "export-heatmaps": {"mi": None, "model_file": None, "schema": None},
    "bench": {"num_fields": 17, "embed_dim": 8, "num_types": 4, "num_features": 10_000, "reps": 5,
              "instances": 200, "ctf3_weighted_pairs": True},
    "count": {"num_types": None, "num_features": None, "num_fields": None, "embed_dim": None},
}

log = logging.getLogger("mtfwfm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of settings")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--model", choices=[k.value for k in ModelKind])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtfwfm", description="MT-FwFM conversion prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic impression/conversion logs")
    _common(p)
    p.add_argument("--synthetic", help="generator JSON path or bundled name (planted, multitask)")
    p.add_argument("--compress", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("prepare", help="attribute, split, downsample and encode logs")
    _common(p)
    p.add_argument("--impressions")
    p.add_argument("--conversions")
    p.add_argument("--lines", help="JSON map line_id -> conversion type")
    p.add_argument("--fields", nargs="+")
    p.add_argument("--window-days", type=float)
    p.add_argument("--downsample", type=float, help="negative keep probability for training")
    p.add_argument("--min-feature-freq", type=int)

    p = sub.add_parser("train", help="train a model on prepared data")
    _common(p)
    p.add_argument("--data", help="directory written by prepare")
    p.add_argument("--embed-dim", "-K", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--reg-lambda", type=float)
    p.add_argument("--reg-kind", choices=[k.value for k in trainer.RegKind])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--init-scale", type=float)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--spend-weights", help="JSON map type -> spend")

    p = sub.add_parser("eval", help="evaluate a model on an instance file")
    _common(p)
    p.add_argument("--model-file")
    p.add_argument("--data", help="binary instance file")
    p.add_argument("--schema")
    p.add_argument("--spend-weights")

    p = sub.add_parser("analyze-mi", help="per-type mutual information of field pairs")
    _common(p)
    p.add_argument("--data", help="binary instance file")
    p.add_argument("--schema")
    p.add_argument("--top-k", type=int)
    p.add_argument("--max-cells", type=int)

    p = sub.add_parser("export-heatmaps", help="MI and |r| heatmaps with correlations")
    _common(p)
    p.add_argument("--mi", help="mi.json written by analyze-mi")
    p.add_argument("--model-file")
    p.add_argument("--schema")

    p = sub.add_parser("bench", help="operation counts and inference latency")
    _common(p)
    p.add_argument("-N", "--num-fields", type=int)
    p.add_argument("-K", "--embed-dim", type=int)
    p.add_argument("-T", "--num-types", type=int)
    p.add_argument("-M", "--num-features", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--instances", type=int)

    p = sub.add_parser("count", help="closed-form parameter count")
    _common(p)
    p.add_argument("-T", "--num-types", type=int)
    p.add_argument("-M", "--num-features", type=int)
    p.add_argument("-N", "--num-fields", type=int)
    p.add_argument("-K", "--embed-dim", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DEFAULTS[args.command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(doc)
    for key, val in vars(args).items():
        if key not in ("command", "config") and val is not None:
            cfg[key] = val
    return cfg


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_gen_config(ref: str) -> GenConfig:
    bundled = files("mtfwfm") / "configs" / f"{ref}.json"
    if bundled.is_file():
        return GenConfig.from_json(json.loads(bundled.read_text()))
    return GenConfig.load(ref)


def cmd_gen_data(cfg: dict, out: Path) -> None:
    gen = _load_gen_config(cfg["synthetic"])
    gen.seed = int(cfg["seed"])
    logs = generate_synthetic(gen)
    write_logs(out, logs, compress=bool(cfg["compress"]))
    _write_json(out / "synthetic_config.json", gen.to_json())
    print(f"{len(logs.impressions)} impressions, {len(logs.conversions)} conversions -> {out}")


def cmd_prepare(cfg: dict, out: Path) -> None:
    _require(cfg, "impressions", "conversions", "lines")
    impressions = data.read_impressions(cfg["impressions"], cfg["fields"])
    fields = cfg["fields"]
    if fields is None:
        if not impressions:
            raise DataError("no impressions and no field list")
        fields = list(impressions[0].field_values)
        impressions = data.read_impressions(cfg["impressions"], fields)
    conversions = data.read_conversions(cfg["conversions"])
    line_types = json.loads(Path(cfg["lines"]).read_text())
    pc = data.PipelineConfig(
        fields=list(fields), type_names=cfg["type_names"],
        train_days=tuple(cfg["train_days"]), val_days=tuple(cfg["val_days"]), test_days=tuple(cfg["test_days"]),
        attribution_window_days=cfg["window_days"], downsample=float(cfg["downsample"]),
        min_feature_freq=int(cfg["min_feature_freq"]), seed=int(cfg["seed"]),
    )
    prepared = data.prepare(impressions, conversions, line_types, pc)
    data.write_schema(out / "schema.json", prepared.schema)
    for name, inst in prepared.splits.items():
        data.write_instances(out / f"{name}.bin", inst, prepared.schema)
    _write_json(out / "stats.json", prepared.stats)
    for name, inst in prepared.splits.items():
        print(f"{name:<6}{len(inst):>10d} samples")


def _load_split(directory: Path, name: str, schema) -> data.InstanceSet | None:
    path = directory / f"{name}.bin"
    if not path.exists():
        return None
    inst, sid = data.read_instances(path)
    if sid != schema.schema_id():
        raise DataError(f"{path} was written for a different schema")
    return inst


def _spend(cfg: dict, schema) -> dict | None:
    return metrics.load_type_weights(cfg["spend_weights"], schema.type_names) if cfg.get("spend_weights") else None


def cmd_train(cfg: dict, out: Path) -> None:
    _require(cfg, "data")
    src = Path(cfg["data"])
    schema = data.read_schema(src / "schema.json")
    train_set = _load_split(src, "train", schema)
    if train_set is None:
        raise DataError(f"{src / 'train.bin'} not found")
    val = _load_split(src, "val", schema)
    mconfig = ModelConfig.for_schema(cfg["model"], schema, int(cfg["embed_dim"]),
                                     ctf3_weighted_pairs=bool(cfg["ctf3_weighted_pairs"]))
    tconfig = trainer.TrainConfig(
        learning_rate=float(cfg["learning_rate"]), reg_lambda=float(cfg["reg_lambda"]), reg_kind=cfg["reg_kind"],
        batch_size=int(cfg["batch_size"]), max_epochs=int(cfg["max_epochs"]), seed=int(cfg["seed"]),
        init_scale=float(cfg["init_scale"]), deterministic=bool(cfg["deterministic"]),
        early_stop_patience=int(cfg["early_stop_patience"]), threads=int(cfg["threads"]),
    )
    weights = _spend(cfg, schema)
    params, tlog = trainer.train(train_set, val, mconfig, tconfig, type_weights=weights,
                                 log_path=out / "train_log.ndjson")
    save_model(out / "model.bin", params, schema)
    summary = {"best_epoch": tlog.best_epoch, "model": mconfig.kind.value}
    for name in ("val", "test"):
        split = _load_split(src, name, schema)
        if split is not None and len(split):
            rep = metrics.report(score(params, split), split.label, split.conv_type, weights)
            summary[name] = rep.to_json()
    _write_json(out / "metrics.json", summary)
    print(f"best epoch {tlog.best_epoch}; model -> {out / 'model.bin'}")


def cmd_eval(cfg: dict, out: Path) -> None:
    _require(cfg, "model_file", "data")
    params, digest = load_model(cfg["model_file"])
    inst, _ = data.read_instances(cfg["data"])
    type_names = data.read_schema(cfg["schema"]).type_names if cfg.get("schema") else (digest or {}).get("type_names", [])
    weights = None
    if cfg.get("spend_weights"):
        weights = metrics.load_type_weights(cfg["spend_weights"], type_names)
    rep = metrics.report(score(params, inst), inst.label, inst.conv_type, weights)
    _write_json(out / "metrics.json", rep.to_json())
    print(rep.format_table(type_names))


def cmd_analyze_mi(cfg: dict, out: Path) -> None:
    _require(cfg, "data", "schema")
    schema = data.read_schema(cfg["schema"])
    inst, _ = data.read_instances(cfg["data"])
    counts = mi.count(inst, schema.num_features, schema.num_types, max_cells=cfg["max_cells"])
    table = mi.mutual_information(counts)
    _write_json(out / "mi.json", table.to_json())
    top = {}
    for t in sorted(table.values):
        name = schema.type_names[t]
        pairs = mi.top_k_pairs(table, t, int(cfg["top_k"]))
        top[name] = [[schema.fields[p], schema.fields[q], float(table.values[t][p, q])] for p, q in pairs]
        print(f"{name}: " + ", ".join(f"({a}, {b})" for a, b, _ in top[name]))
    _write_json(out / "top_pairs.json", top)


def cmd_export_heatmaps(cfg: dict, out: Path) -> None:
    _require(cfg, "mi", "schema")
    schema = data.read_schema(cfg["schema"])
    table = mi.MiTable.from_json(json.loads(Path(cfg["mi"]).read_text()))
    params = load_model(cfg["model_file"])[0] if cfg.get("model_file") else None
    summary = mi.export_heatmaps(table, params, out, schema.fields, schema.type_names)
    for name, r in sorted(summary["pearson"].items()):
        print(f"{name}: pearson(MI, |r|) = {r if r is None else round(r, 4)}")


def cmd_bench(cfg: dict, out: Path) -> None:
    rep = complexity.complexity_report(
        int(cfg["num_fields"]), int(cfg["embed_dim"]), int(cfg["num_types"]), int(cfg["num_features"]),
        bench_reps=int(cfg["reps"]), bench_instances=int(cfg["instances"]),
        ctf3_weighted_pairs=bool(cfg["ctf3_weighted_pairs"]), seed=int(cfg["seed"]),
    )
    _write_json(out / "complexity.json", rep.to_json())
    print(rep.format_table())


def cmd_count(cfg: dict) -> None:
    _require(cfg, "num_types", "num_features", "num_fields", "embed_dim")
    mc = ModelConfig(cfg["model"], int(cfg["num_fields"]), int(cfg["num_features"]),
                     int(cfg["num_types"]), int(cfg["embed_dim"]))
    if mc.kind is ModelKind.MT_FWFM:
        print(complexity.count_params(mc))
    else:
        print(ModelParams.zeros(mc).num_free_parameters())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-mi": cmd_analyze_mi,
    "export-heatmaps": cmd_export_heatmaps,
    "bench": cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MTFWFM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        if args.command == "count":
            cmd_count(cfg)
            return EXIT_OK
        out = _out_dir(cfg)
        _write_json(out / f"resolved_config_{args.command}.json", cfg)
        COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"mtfwfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mtfwfm: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MtfwfmError, OSError, ValueError, KeyError) as exc:
        print(f"mtfwfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
