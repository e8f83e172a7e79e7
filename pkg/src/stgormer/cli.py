"""Command-line entry point: synth, train, eval, predict, encode, study.

Configuration lives in flat key=value files with dotted keys (model.hidden_dim,
train.batch_size, data.threshold); any key can be overridden on the command
line.  Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attention import spd_bias
from .data import (FlowDataset, SyntheticSpec, load_flows, load_timestamps,
                   save_flows, save_timestamps, split, synthesize,
                   write_flow_tensor)
from .graph import degrees, load_graph, save_graph, shortest_path_matrix
from .model import StgormerConfig, build, load_model
from .train import (STUDY_COLUMNS, DivergenceError, TrainConfig, evaluate,
                    study, train_loop)


class UsageError(ValueError):
    """Bad command-line invocation (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- key=value plumbing -----------------------------------------------------------


def parse_kv_file(path) -> dict[str, str]:
    """Flat key=value document; '#' comments and blank lines ignored."""
    items: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in items:
                raise ValueError(f"{path}: line {lineno}: duplicate key {key!r}")
            items[key] = value.strip()
    return items


def _coerce_like(current, raw: str):
    if isinstance(current, bool):
        if raw not in ("true", "false"):
            raise ValueError("expected true or false")
        return raw == "true"
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != len(current):
            raise ValueError(f"expected {len(current)} comma-separated numbers")
        return tuple(parts)
    return raw


def _apply_items(defaults, prefix: str, items: dict[str, str], errors: list[str]):
    """Overlay '<prefix>.<field>=value' items onto a dataclass instance."""
    kwargs = {}
    names = {f.name for f in dataclasses.fields(defaults)}
    for key, raw in items.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in names:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            kwargs[name] = _coerce_like(getattr(defaults, name), raw)
        except ValueError as exc:
            errors.append(f"bad value for {key!r}: {exc}")
    return dataclasses.replace(defaults, **kwargs)


KNOWN_PREFIXES = ("model", "train", "data")
DATA_KEYS = {"threshold"}


def resolve_override_key(key: str) -> str:
    """Allow bare field names when they map to exactly one config section."""
    if "." in key:
        return key
    hits = []
    if key in {f.name for f in dataclasses.fields(StgormerConfig)}:
        hits.append(f"model.{key}")
    if key in {f.name for f in dataclasses.fields(TrainConfig)}:
        hits.append(f"train.{key}")
    if key in DATA_KEYS:
        hits.append(f"data.{key}")
    if len(hits) == 1:
        return hits[0]
    if not hits:
        raise ValueError(f"unknown config key {key!r}")
    raise ValueError(f"ambiguous config key {key!r}: matches {', '.join(hits)}")


def load_run_config(config_path, overrides: list[str]
                    ) -> tuple[StgormerConfig, TrainConfig, dict[str, str]]:
    """Parse and validate the full run configuration, reporting all violations."""
    items = parse_kv_file(config_path) if config_path else {}
    for entry in overrides or []:
        if "=" not in entry:
            raise ValueError(f"override {entry!r} is not of the form key=value")
        key, _, value = entry.partition("=")
        items[resolve_override_key(key.strip())] = value.strip()

    errors: list[str] = []
    for key in items:
        prefix = key.split(".", 1)[0]
        if prefix not in KNOWN_PREFIXES:
            errors.append(f"unknown config key {key!r}")
        elif prefix == "data" and key.split(".", 1)[1] not in DATA_KEYS:
            errors.append(f"unknown config key {key!r}")
    mcfg = _apply_items(StgormerConfig(), "model", items, errors)
    tcfg = _apply_items(TrainConfig(), "train", items, errors)
    if "data.threshold" in items:
        try:
            tcfg = dataclasses.replace(
                tcfg, threshold=float(items["data.threshold"]))
        except ValueError:
            errors.append(f"bad value for 'data.threshold': {items['data.threshold']!r}")
    errors.extend(mcfg.validate())
    errors.extend(tcfg.validate())
    if errors:
        raise ValueError("config: " + "; ".join(errors))

    resolved = {f"model.{k}": v for k, v in _items_of(mcfg).items()}
    resolved.update({f"train.{k}": v for k, v in _items_of(tcfg).items()
                     if k not in ("checkpoint_dir", "threshold")})
    resolved["data.threshold"] = repr(tcfg.threshold)
    return mcfg, tcfg, resolved


def _items_of(cfg) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, float):
            out[f.name] = repr(v)
        elif isinstance(v, tuple):
            out[f.name] = ",".join(repr(float(x)) for x in v)
        else:
            out[f.name] = str(v)
    return out


def parse_synth_spec(items: dict[str, str]) -> SyntheticSpec:
    defaults = SyntheticSpec()
    errors: list[str] = []
    names = {f.name for f in dataclasses.fields(SyntheticSpec)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            errors.append(f"unknown synth spec field {key!r}")
            continue
        try:
            kwargs[key] = _coerce_like(getattr(defaults, key), raw)
        except ValueError as exc:
            errors.append(f"bad value for {key!r}: {exc}")
    if errors:
        raise ValueError("synth spec: " + "; ".join(errors))
    spec = dataclasses.replace(defaults, **kwargs)
    spec.validate()
    return spec


# -- shared I/O ---------------------------------------------------------------------


def load_data_dir(data_dir) -> FlowDataset:
    data_dir = Path(data_dir)
    for name in ("graph.txt", "flows.txt", "timestamps.txt"):
        if not (data_dir / name).is_file():
            raise ValueError(f"missing data file: {data_dir / name}")
    graph = load_graph(data_dir / "graph.txt")
    timestamps = load_timestamps(data_dir / "timestamps.txt")
    return load_flows(data_dir / "flows.txt", graph, timestamps)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, resolved: dict[str, str], extra: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"artifact_version={__version__}\n")
        fh.write(f"started={_now()}\n")
        for k, v in extra.items():
            fh.write(f"{k}={v}\n")
        for k in sorted(resolved):
            fh.write(f"{k}={resolved[k]}\n")


def finish_manifest(path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"finished={_now()}\n")


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in ("mae", "rmse", "mape", "threshold", "count"):
            value = report[key]
            fh.write(f"{key}={repr(float(value)) if key != 'count' else value}\n")


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = parse_synth_spec(parse_kv_file(args.spec))
    ds = synthesize(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(ds.graph, out / "graph.txt")
    save_flows(out / "flows.txt", ds)
    save_timestamps(out / "timestamps.txt", ds.timestamps)
    items = _items_of(spec)
    with open(out / "synth-spec.txt", "w", encoding="utf-8") as fh:
        for k in sorted(items):
            fh.write(f"{k}={items[k]}\n")
    print(f"synthesized {ds.num_steps} steps x {ds.num_nodes} nodes "
          f"x {ds.num_channels} channels into {out}")
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg, resolved = load_run_config(args.config, args.override)
    ds = load_data_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.txt"
    write_manifest(manifest_path, resolved, {"data_dir": str(Path(args.data))})
    train_ds, val_ds, _ = split(ds)
    model = build(mcfg, ds.graph)
    tcfg = dataclasses.replace(tcfg, checkpoint_dir=str(out))
    history = train_loop(model, (train_ds, val_ds), tcfg)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"manifest": str(manifest_path)}) + "\n")
        for rec in history.epochs:
            fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")
    finish_manifest(manifest_path)
    print(f"trained {len(history.epochs)} epochs; best epoch {history.best_epoch} "
          f"(val mae {history.best_val_mae:.6f}); checkpoint at {out / 'model.ckpt'}")
    return 0


def _split_by_name(ds: FlowDataset, name: str) -> FlowDataset:
    train_ds, val_ds, test_ds = split(ds)
    return {"train": train_ds, "val": val_ds, "test": test_ds}[name]


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    ds = load_data_dir(args.data)
    if ds.num_nodes != model.graph.num_nodes:
        raise ValueError(
            f"node count mismatch: checkpoint graph has {model.graph.num_nodes} "
            f"nodes, data has {ds.num_nodes}")
    piece = _split_by_name(ds, args.split)
    report = evaluate(model, piece, args.threshold)
    out = Path(args.out) if args.out else Path(f"eval_{args.split}.txt")
    write_report(out, report)
    print(f"mae={report['mae']!r} rmse={report['rmse']!r} "
          f"mape(%)={report['mape'] * 100.0!r} count={report['count']}")
    print(f"report written to {out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.checkpoint)
    timestamps = load_timestamps(args.timestamps)
    window = load_flows(args.window, model.graph, timestamps)
    if window.num_steps != model.config.input_len:
        raise ValueError(
            f"window carries {window.num_steps} steps but the model expects "
            f"input_len={model.config.input_len}")
    forecast = model.predict(window.flows, window.timestamps)
    write_flow_tensor(args.out, forecast)
    print(f"forecast written to {args.out}")
    return 0


def cmd_encode(args) -> int:
    g = load_graph(args.graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indeg, outdeg = degrees(g)
    with open(out / "degrees.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["indegree", "outdegree"])
        for i, o in zip(indeg, outdeg):
            writer.writerow([int(i), int(o)])
    spd = shortest_path_matrix(g)
    header = [str(i) for i in range(g.num_nodes)]
    with open(out / "spd.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in spd.values:
            writer.writerow([int(v) for v in row])
    if args.checkpoint:
        model = load_model(args.checkpoint)
        bias = spd_bias(spd, model.spd_table, model.config.max_spd)
        with open(out / "sa_bias.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in bias.data:
                writer.writerow([repr(float(v)) for v in row])
    print(f"structural encodings written to {out}")
    return 0


def cmd_study(args) -> int:
    mcfg, tcfg, _ = load_run_config(args.config, args.override)
    ds = load_data_dir(args.data)
    rows = study(mcfg, tcfg, ds, args.axis)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STUDY_COLUMNS)
        for row in rows:
            writer.writerow([row["variant"], repr(row["mae"]), repr(row["rmse"]),
                             repr(row["mape"]), row["epochs"], row["params"]])
    print(f"study table ({len(rows)} rows) written to {out}")
    return 0


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="stgormer",
        description="Traffic forecasting with a spatio-temporal graph transformer.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True, help="synthetic spec key=value file")
    p.add_argument("--out", required=True, help="output directory for dataset files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory",
                       formatter_class=fmt)
    p.add_argument("--config", default="", help="run config key=value file "
                   "(empty for built-in defaults)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for "
                   "checkpoint/history/manifest")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="which chronological split to evaluate")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="mask targets at or below this value")
    p.add_argument("--out", default="", help="report file (default eval_<split>.txt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="forecast from one input window",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--window", required=True, help="input window in flow-file format")
    p.add_argument("--timestamps", required=True, help="timestamps for the window")
    p.add_argument("--out", required=True, help="forecast output path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("encode", help="dump structural encodings as CSV",
                       formatter_class=fmt)
    p.add_argument("--graph", required=True, help="edge-list graph file")
    p.add_argument("--out", required=True, help="output directory for CSVs")
    p.add_argument("--checkpoint", default="",
                   help="optional checkpoint for the realized attention bias")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("study", help="train a grid of config variants",
                       formatter_class=fmt)
    p.add_argument("--config", default="", help="run config key=value file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--axis", required=True,
                   choices=("ablation", "block_count", "block_order"),
                   help="which variant grid to run")
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_study)
    return parser


def _fail(code: int, message: str) -> int:
    flat = " ".join(str(message).split())
    print(f"error: {flat}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, str(exc))
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(1, str(exc))
    except DivergenceError as exc:
        return _fail(3, str(exc))
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        return _fail(2, str(exc))


if __name__ == "__main__":
    sys.exit(main())
