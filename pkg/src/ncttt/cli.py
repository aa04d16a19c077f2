"""Command-line entry point: ``ncttt <verb> [options]``.

Exit status is 0 on success, 1 on a usage or configuration error and 2 on a
runtime failure. Every failure writes one JSON line to stderr. Nothing is
written outside the output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import npyio, pipeline
from .data import save_dataset
from .pipeline import ExperimentConfig

DEFAULT_OUT = "ncttt-out"
VERBS = ("train", "adapt", "eval", "sweep", "fig", "gen-data", "npy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration loading ------------------------------------------------------------------

def _check_keys(data, schema, where: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(data, dict):
            raise UsageError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
        for key, value in data.items():
            path = f"{where}.{key}" if where else key
            if key not in schema:
                raise UsageError(f"unknown config key {path!r}")
            _check_keys(value, schema[key], path)
    elif isinstance(schema, list) and schema and isinstance(schema[0], dict):
        if not isinstance(data, list):
            raise UsageError(f"{where}: expected a list")
        for i, item in enumerate(data):
            _check_keys(item, schema[0], f"{where}[{i}]")


def _schema() -> dict:
    return pipeline.benchmark_config().to_dict()


def load_config(path: str | None, overrides: list[str], seed: int | None) -> ExperimentConfig:
    """Benchmark defaults, then the JSON file, then ``--override`` pairs, then ``--seed``."""
    schema = _schema()
    cfg = copy.deepcopy(schema)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        _check_keys(user, schema, "")
        for section, values in user.items():
            if isinstance(values, dict) and section != "model":
                cfg[section].update(values)
            else:
                cfg[section] = values
    for item in overrides:
        apply_override(cfg, schema, item)
    if seed is not None:
        cfg["train"]["seed"] = seed
    try:
        return ExperimentConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _type_ok(value, reference) -> bool:
    if reference is None:
        return value is None or isinstance(value, (int, float, str)) and not isinstance(value, bool)
    if isinstance(reference, bool):
        return isinstance(value, bool)
    if isinstance(reference, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(reference, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(reference, (list, dict, str)):
        return isinstance(value, type(reference))
    return False


# keys whose default is None but that take a typed value
_NULLABLE = {"adapt.attach_layer": int, "data.source_manifest": str, "data.target_manifest": str}


def apply_override(cfg: dict, schema: dict, item: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as JSON, falling back to a bare string."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    node, ref = cfg, schema
    for p in parts[:-1]:
        if not isinstance(ref, dict) or p not in ref:
            raise UsageError(f"unknown config key {key!r}")
        node, ref = node[p], ref[p]
    leaf = parts[-1]
    if not isinstance(ref, dict) or leaf not in ref:
        raise UsageError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    reference = ref[leaf]
    if key in _NULLABLE and value is not None:
        want = _NULLABLE[key]
        ok = isinstance(value, want) and not isinstance(value, bool)
    else:
        ok = _type_ok(value, reference)
    if not ok:
        raise UsageError(f"override {key}: expected {type(reference).__name__}, got {raw!r}")
    if isinstance(reference, float):
        value = float(value)
    if isinstance(reference, dict):
        _check_keys(value, reference, key)
    node[leaf] = value


# -- output handling --------------------------------------------------------------------------

def out_dir(args) -> Path:
    return Path(args.out or os.environ.get("NCTTT_OUT_DIR") or DEFAULT_OUT)


def inside(root: Path, name: str) -> Path:
    """Resolve ``name`` relative to ``root`` and refuse anything that escapes it."""
    root_r = root.resolve()
    target = (root / name).resolve()
    if target != root_r and root_r not in target.parents:
        raise UsageError(f"output path {name!r} lies outside the output directory {root}")
    return target


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- verbs ------------------------------------------------------------------------------------

def cmd_train(args) -> None:
    cfg = load_config(args.config, args.override, args.seed)
    root = out_dir(args)
    source, source_test, _ = pipeline.build_datasets(cfg.data, cfg.train.seed)
    run_dir = pipeline.run_directory(root, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    model, state, record = pipeline.load_or_train(cfg, source, run_dir, force=True)
    metrics = {"source_accuracy": pipeline.accuracy(model, source_test), "config_hash": cfg.train_hash()}
    emit({"run_dir": str(run_dir), "checkpoint": str(run_dir / "checkpoint.ncttt"), **metrics})


def cmd_adapt(args) -> None:
    cfg = load_config(args.config, args.override, args.seed)
    res = pipeline.run_experiment(cfg, out_dir(args))
    m = res.metrics
    emit({k: m[k] for k in ("source_accuracy", "target_accuracy", "ptbn_accuracy", "unadapted_accuracy",
                            "adapted_accuracy", "iterations", "config_hash")})


def cmd_eval(args) -> None:
    cfg = load_config(args.config, args.override, args.seed)
    metrics, run_dir = pipeline.run_eval(cfg, out_dir(args))
    emit({**metrics, "run_dir": str(run_dir)})


def _csv_list(text: str, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as a comma-separated list of {kind.__name__}") from None


def cmd_sweep(args) -> None:
    cfg = load_config(args.config, args.override, args.seed)
    layers = _csv_list(args.layers, int)
    sigmas = _csv_list(args.sigmas, float)
    seeds = _csv_list(args.seeds, int)
    if len(seeds) < 3:
        raise UsageError(f"a sweep needs at least 3 seeds, got {len(seeds)}")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    for layer in layers:
        if not 1 <= layer <= len(cfg.model.blocks):
            raise UsageError(f"attach layer {layer} outside [1, {len(cfg.model.blocks)}]")
    rows = pipeline.sweep(cfg, layers, sigmas, seeds, jobs=args.jobs)
    root = out_dir(args)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "sweep.csv"
    pipeline.write_csv(path, pipeline.SWEEP_COLUMNS, rows)
    best = max(rows, key=lambda r: r["adapted_accuracy_mean"])
    emit({"csv": str(path), "cells": len(rows),
          "best": {k: best[k] for k in ("attach_layer", "sigma_s", "adapted_accuracy_mean")}})


def cmd_fig(args) -> None:
    params = {k: v for k, v in {
        "dim": args.dim, "sigma_s": args.sigma_s, "sigma_o": args.sigma_o, "n_centers": args.n_centers,
        "size": args.grid_size, "extent": args.extent, "beta_min": args.beta_min, "beta_max": args.beta_max,
        "step": args.beta_step, "n": args.samples, "steps": args.train_steps,
    }.items() if v is not None}
    params["seed"] = 0 if args.seed is None else args.seed
    params["uncorrected"] = args.literal
    if args.kind == "accuracy_curve":
        cfg = load_config(args.config, args.override, args.seed)
        res = pipeline.run_experiment(cfg, iterations=args.iterations)
        params["curve"] = res.curve.tolist()
    paths = pipeline.emit_figure_data(args.kind, params, out_dir(args), svg=args.svg)
    emit({"kind": args.kind, "files": [str(p) for p in paths]})


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config, args.override, args.seed)
    source, source_test, target = pipeline.build_datasets(cfg.data, cfg.train.seed)
    root = out_dir(args)
    paths = [save_dataset(ds, root, stem) for ds, stem in
             ((source, "source"), (source_test, "source_test"), (target, "target"))]
    emit({"manifests": [str(p) for p in paths], "sizes": [len(source), len(source_test), len(target)]})


def cmd_npy(args) -> None:
    root = out_dir(args)
    if args.action == "info":
        emit({"path": args.path, **npyio.npy_info(args.path)})
        return
    if args.name is None:
        raise UsageError(f"npy {args.action} needs an output NAME")
    dest = inside(root, args.name)
    if args.action == "to-csv":
        arr = npyio.read_npy(args.path)
        if arr.ndim > 2:
            raise UsageError(f"to-csv supports 1-D and 2-D arrays, got shape {arr.shape}")
        root.mkdir(parents=True, exist_ok=True)
        with open(dest, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(np.atleast_2d(arr).tolist())
        emit({"written": str(dest), "shape": list(arr.shape), "dtype": arr.dtype.str})
        return
    elif args.action == "from-csv":
        try:
            arr = np.loadtxt(args.path, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"cannot read CSV {args.path}: {exc}") from None
        root.mkdir(parents=True, exist_ok=True)
        npyio.write_npy(dest, arr, args.dtype)
    else:  # convert
        arr = npyio.read_npy(args.path)
        root.mkdir(parents=True, exist_ok=True)
        npyio.write_npy(dest, arr, args.dtype)
    emit({"written": str(dest), **npyio.npy_info(dest)})


# -- parser -------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", metavar="PATH", help="experiment JSON (defaults to the built-in benchmark)")
        p.add_argument("--override", metavar="KEY=VALUE", action="append", default=[],
                       help="set a dotted config key, e.g. adapt.iterations=0 (repeatable)")
    p.add_argument("--seed", type=int, help="seed governing all randomness (sets train.seed)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: $NCTTT_OUT_DIR or ./ncttt-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ncttt", description="Noise-contrastive test-time training on synthetic domains.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", required=True)

    p = sub.add_parser("train", help="train a source model and write its checkpoint")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt on the shifted target set and record the accuracy curve")
    _common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate the unadapted and the prediction-time-BN model")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over attach layer x sigma_s, several seeds per cell")
    _common(p)
    p.add_argument("--layers", default="1", help="comma-separated attach layers (default: 1)")
    p.add_argument("--sigmas", default="0.35", help="comma-separated sigma_s values (default: 0.35)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds, at least 3 (default: 0,1,2)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fig", help="write figure data as CSV (optionally SVG heatmaps)")
    p.add_argument("kind", choices=pipeline.FIGURE_KINDS)
    _common(p)
    p.add_argument("--dim", type=int, help="noise dimension for beta_curve (default: 16)")
    p.add_argument("--sigma-s", type=float, help="in-distribution noise scale")
    p.add_argument("--sigma-o", type=float, help="out-of-distribution noise scale")
    p.add_argument("--n-centers", type=int, help="number of 2-D centers (default: 20)")
    p.add_argument("--grid-size", type=int, help="grid points per axis")
    p.add_argument("--extent", type=float, help="grid half-width")
    p.add_argument("--beta-min", type=float, help="beta_curve start (default: 1)")
    p.add_argument("--beta-max", type=float, help="beta_curve end (default: 3)")
    p.add_argument("--beta-step", type=float, help="beta_curve step (default: 0.01)")
    p.add_argument("--samples", type=int, help="noise samples for samples_probs (default: 500)")
    p.add_argument("--train-steps", type=int, help="discriminator steps for gradient_field (default: 1500)")
    p.add_argument("--iterations", type=int, default=50, help="adaptation iterations for accuracy_curve (default: 50)")
    p.add_argument("--literal", action="store_true", help="beta_curve with the quadratic term not scaled by dim")
    p.add_argument("--svg", action="store_true", help="also write an SVG heatmap for grid kinds")
    p.set_defaults(func=cmd_fig)

    p = sub.add_parser("gen-data", help="write source, source-test and target datasets with manifests")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("npy", help="inspect or convert NPY files")
    p.add_argument("action", choices=("info", "to-csv", "from-csv", "convert"))
    p.add_argument("path", help="input file")
    p.add_argument("name", nargs="?", help="output file name inside the output directory")
    p.add_argument("--dtype", choices=sorted(npyio.DTYPES), default="f8", help="output dtype (default: f8)")
    _common(p, config=False)
    p.set_defaults(func=cmd_npy)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    kind = "usage_error" if code == 1 else "runtime_error"
    line = json.dumps({"error": {"code": code, "kind": kind, "type": type(exc).__name__, "message": str(exc)}})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        return _fail(1, exc)
    except Exception as exc:  # any other failure is a runtime error
        return _fail(2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
