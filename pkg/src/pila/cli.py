"""Batch command-line front end.

Subcommands: gen-data, train, eval, sweep, sensitivity, report. Every run
resolves a config (YAML file plus flag overrides), writes a manifest with
the resolved config, the seed, and content hashes of its file inputs, and
puts all artifacts in a directory named by the manifest hash so reruns with
different settings never silently overwrite each other.

Exit codes: 0 success, 1 validation error (the offending key is named on
stderr), 2 runtime failure (training diverged).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np
import yaml

from . import gnssdata, mogi, report, tableio, trainer
from .model import LossConfig
from .trainer import HvaeSettings, TrainConfig, TrainingDivergedError

ENV_OUT_ROOT = "PILA_OUT_ROOT"
ENV_WORKERS = "PILA_WORKERS"


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


# -- config file ------------------------------------------------------------------

MODEL_KEYS = {"kind", "rank", "prior", "beta", "lambda", "anneal_epochs",
              "eps_clip", "nu"}
TRAIN_KEYS = {"epochs", "batch_size", "lr", "weight_decay", "seed", "val_fraction",
              "hvae_beta", "hvae_warmup_epochs", "hvae_target_ratio"}
PATHS_KEYS = {"geometry_csv", "data_csv", "out_root"}
SECTIONS = {"scenario", "model", "train", "paths"}


def _check_keys(section: str, data: dict, allowed: set):
    for key in data:
        if key not in allowed:
            raise ConfigError(
                f"unknown config key {section}.{key}; "
                f"valid keys: {', '.join(sorted(allowed))}"
            )


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"config file {path} is not valid YAML: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping of sections")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(
                f"unknown config section {key}; valid sections: "
                f"{', '.join(sorted(SECTIONS))}"
            )
        if raw[key] is not None and not isinstance(raw[key], dict):
            raise ConfigError(f"config section {key} must be a mapping")
    return {k: (v or {}) for k, v in raw.items()}


def build_scenario_config(section: dict) -> gnssdata.ScenarioConfig:
    allowed = {f.name for f in dataclasses.fields(gnssdata.ScenarioConfig)}
    _check_keys("scenario", section, allowed)
    try:
        return gnssdata.ScenarioConfig(**section)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid scenario config: {err}") from None


def build_train_config(model: dict, train: dict, overrides: dict) -> TrainConfig:
    _check_keys("model", model, MODEL_KEYS)
    _check_keys("train", train, TRAIN_KEYS)
    merged_model = dict(model)
    merged_train = dict(train)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in MODEL_KEYS:
            merged_model[key] = value
        else:
            merged_train[key] = value
    try:
        loss = LossConfig(
            beta=float(merged_model.get("beta", 10.0)),
            lam=float(merged_model.get("lambda", 0.1)),
            anneal_epochs=int(merged_model.get("anneal_epochs", 30)),
            prior_mode=merged_model.get("prior", "endstop"),
            eps_clip=float(merged_model.get("eps_clip", 1e-6)),
        )
        hvae = HvaeSettings(
            beta=float(merged_train.get("hvae_beta", HvaeSettings().beta)),
            warmup_epochs=int(merged_train.get("hvae_warmup_epochs", 5)),
            target_ratio=float(merged_train.get("hvae_target_ratio", 0.1)),
        )
        return TrainConfig(
            model_kind=merged_model.get("kind", "pila"),
            rank=int(merged_model.get("rank", 4)),
            epochs=int(merged_train.get("epochs", 150)),
            batch_size=int(merged_train.get("batch_size", 8)),
            lr=float(merged_train.get("lr", 3e-4)),
            weight_decay=float(merged_train.get("weight_decay", 1e-4)),
            seed=int(merged_train.get("seed", 0)),
            val_fraction=float(merged_train.get("val_fraction", 0.1)),
            nu=float(merged_model.get("nu", 0.25)),
            loss=loss,
            hvae=hvae,
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid model/train config: {err}") from None


# -- manifests and output directories ------------------------------------------------

def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_manifest(command: str, config: dict, seed, inputs: dict) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: _sha256_file(path) for name, path in sorted(inputs.items())
                   if path is not None},
    }


def resolve_outdir(out_root, command: str, manifest: dict, force: bool) -> str:
    canonical = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:12]
    outdir = os.path.join(out_root, f"{command}-{digest}")
    if os.path.isdir(outdir) and os.listdir(outdir) and not force:
        raise ConfigError(
            f"output directory {outdir} already exists (identical run); "
            "pass --force to overwrite"
        )
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return outdir


def _out_root(args, paths: dict) -> str:
    return (args.out_root or paths.get("out_root")
            or os.environ.get(ENV_OUT_ROOT) or "runs")


# -- dataset resolution -----------------------------------------------------------

def resolve_dataset(args, sections: dict, scenario_cfg: gnssdata.ScenarioConfig):
    """Dataset precedence: --data run dir, then paths.data_csv, then generate."""
    paths = sections.get("paths", {})
    _check_keys("paths", paths, PATHS_KEYS)
    data_dir = getattr(args, "data", None)
    if data_dir:
        inputs = {
            "observations_csv": os.path.join(data_dir, "observations.csv"),
            "geometry_csv": os.path.join(data_dir, "geometry.csv"),
        }
        return gnssdata.dataset_from_run_dir(data_dir), inputs
    data_csv = paths.get("data_csv")
    if data_csv:
        geometry_csv = paths.get("geometry_csv")
        if not geometry_csv:
            raise ConfigError("paths.data_csv requires paths.geometry_csv")
        geometry = mogi.read_geometry_csv(geometry_csv)
        dataset = gnssdata.load_series(data_csv, geometry)
        return dataset, {"data_csv": data_csv, "geometry_csv": geometry_csv}
    return gnssdata.generate(gnssdata.build_scenario(scenario_cfg)), {}


def _window(args, dataset) -> tuple:
    if getattr(args, "window", None):
        return tuple(args.window)
    if dataset.event_window is None:
        raise ConfigError(
            "dataset carries no event window; pass --window START STOP"
        )
    return dataset.event_window


# -- subcommand implementations -----------------------------------------------------

def cmd_gen_data(args) -> int:
    sections = load_config_file(args.config)
    scenario_section = dict(sections.get("scenario", {}))
    if args.seed is not None:
        scenario_section["seed"] = args.seed
    cfg = build_scenario_config(scenario_section)
    manifest = make_manifest("gen-data", dataclasses.asdict(cfg), cfg.seed,
                             {"geometry_csv": cfg.geometry_csv})
    outdir = resolve_outdir(_out_root(args, sections.get("paths", {})),
                            "gen-data", manifest, args.force)
    scenario = gnssdata.build_scenario(cfg)
    dataset = gnssdata.generate(scenario)
    mogi.write_geometry_csv(os.path.join(outdir, "geometry.csv"), scenario.geometry)
    gnssdata.write_observations_csv(os.path.join(outdir, "observations.csv"), dataset)
    gnssdata.write_components_csv(os.path.join(outdir, "components.csv"), dataset)
    gnssdata.write_true_params_csv(os.path.join(outdir, "true_params.csv"), dataset)
    with open(os.path.join(outdir, "scenario.yaml"), "w") as fh:
        yaml.safe_dump(dataclasses.asdict(cfg), fh, sort_keys=True)
    print(outdir)
    return 0


def _train_overrides(args) -> dict:
    return {
        "seed": args.seed,
        "rank": args.rank,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "kind": args.kind,
    }


def cmd_train(args) -> int:
    sections = load_config_file(args.config)
    scenario_cfg = build_scenario_config(dict(sections.get("scenario", {})))
    config = build_train_config(sections.get("model", {}), sections.get("train", {}),
                                _train_overrides(args))
    dataset, inputs = resolve_dataset(args, sections, scenario_cfg)
    dataset.event_window = _window(args, dataset)
    manifest_cfg = {
        "scenario": dataclasses.asdict(scenario_cfg),
        "train": dataclasses.asdict(config),
        "data": args.data,
        "window": list(dataset.event_window),
    }
    manifest = make_manifest("train", manifest_cfg, config.seed, inputs)
    outdir = resolve_outdir(_out_root(args, sections.get("paths", {})),
                            "train", manifest, args.force)
    result = trainer.train(dataset, config)
    trainer.save_checkpoint(os.path.join(outdir, "checkpoint.npz"), result.checkpoint)
    columns = trainer.history_columns(config.model_kind)
    tableio.write_csv(os.path.join(outdir, "history.csv"), columns,
                      [[row.get(c) for c in columns] for row in result.history])
    with open(os.path.join(outdir, "split.json"), "w") as fh:
        json.dump({"train": result.split.train.tolist(),
                   "val": result.split.val.tolist(),
                   "test": result.split.test.tolist()}, fh)
        fh.write("\n")
    print(outdir)
    return 0


def _write_eval_outputs(outdir, evaluation, dataset):
    metrics = evaluation.metrics
    tableio.write_csv(os.path.join(outdir, "metrics.csv"),
                      list(metrics.FIELDS), [metrics.as_row()])

    header = ["date", "day"] + [f"eta_{n}" for n in mogi.VARIABLE_NAMES] + \
        ["xm_km", "ym_km", "depth_km", "dv_m3",
         "true_xm_km", "true_ym_km", "true_depth_km", "true_dv_m3"]
    date_of = {int(d): dt for d, dt in zip(dataset.days, dataset.dates())}
    rows = []
    for i, day in enumerate(evaluation.days):
        row = [date_of[int(day)].isoformat(), int(day)]
        row += list(evaluation.eta[i])
        row += list(evaluation.z_phys[i])
        if evaluation.true_params is not None:
            row += list(evaluation.true_params[i])
        else:
            row += [None] * 4
        rows.append(row)
    tableio.write_csv(os.path.join(outdir, "params_daily.csv"), header, rows)

    n = len(dataset.geometry)
    header = ["date", "day", "station", "direction",
              "observed_mm", "xf_mm", "delta_mm", "xc_mm"]
    rows = []
    for i, day in enumerate(evaluation.days):
        date = date_of[int(day)].isoformat()
        for s, name in enumerate(dataset.geometry.names):
            for b, direction in enumerate(("east", "north", "up")):
                j = b * n + s
                rows.append([date, int(day), name, direction,
                             evaluation.x[i, j], evaluation.xf[i, j],
                             evaluation.delta[i, j], evaluation.xc[i, j]])
    tableio.write_csv(os.path.join(outdir, "decomposition.csv"), header, rows)


def cmd_eval(args) -> int:
    sections = load_config_file(args.config)
    scenario_cfg = build_scenario_config(dict(sections.get("scenario", {})))
    dataset, inputs = resolve_dataset(args, sections, scenario_cfg)
    inputs["checkpoint"] = args.checkpoint
    window = _window(args, dataset)
    manifest = make_manifest("eval", {"window": list(window), "data": args.data},
                             args.seed, inputs)
    outdir = resolve_outdir(_out_root(args, sections.get("paths", {})),
                            "eval", manifest, args.force)
    checkpoint = trainer.load_checkpoint(args.checkpoint)
    evaluation = trainer.evaluate(checkpoint, dataset, window)
    _write_eval_outputs(outdir, evaluation, dataset)
    print(outdir)
    return 0


def cmd_sweep(args) -> int:
    sections = load_config_file(args.config)
    scenario_cfg = build_scenario_config(dict(sections.get("scenario", {})))
    config = build_train_config(sections.get("model", {}), sections.get("train", {}),
                                _train_overrides(args))
    dataset, inputs = resolve_dataset(args, sections, scenario_cfg)
    dataset.event_window = _window(args, dataset)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    window = list(dataset.event_window)
    if not values:
        raise ConfigError("--values must list at least one value")
    try:
        for value in values:
            trainer.config_for_axis(config, args.axis, value)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    workers = args.workers or int(os.environ.get(ENV_WORKERS, "1"))
    manifest_cfg = {
        "scenario": dataclasses.asdict(scenario_cfg),
        "train": dataclasses.asdict(config),
        "axis": args.axis, "values": values, "data": args.data,
        "window": window,
    }
    manifest = make_manifest("sweep", manifest_cfg, config.seed, inputs)
    outdir = resolve_outdir(_out_root(args, sections.get("paths", {})),
                            "sweep", manifest, args.force)
    header, rows = trainer.sweep(dataset, config, args.axis, values,
                                 workers=workers)
    tableio.write_csv(os.path.join(outdir, "sweep.csv"), header, rows)
    print(outdir)
    return 0


def cmd_sensitivity(args) -> int:
    sections = load_config_file(args.config)
    scenario_cfg = build_scenario_config(dict(sections.get("scenario", {})))
    if args.seed is not None:
        scenario_cfg = dataclasses.replace(scenario_cfg, seed=args.seed)
    dataset, inputs = resolve_dataset(args, sections, scenario_cfg)

    sweep_names = [v.strip() for v in args.sweep.split(",") if v.strip()]
    fixed = {}
    for spec_item in args.fixed or []:
        if "=" not in spec_item:
            raise ConfigError(f"--fixed expects name=value, got {spec_item!r}")
        name, value = spec_item.split("=", 1)
        try:
            fixed[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--fixed {name}: {value!r} is not a number") from None

    bounds = mogi.VariableBounds()
    lo, hi = bounds.as_arrays()
    index = {n: i for i, n in enumerate(mogi.VARIABLE_NAMES)}
    sweep = {}
    for name in sweep_names:
        if name not in index:
            raise ConfigError(
                f"unknown variable {name!r}; valid names: "
                f"{', '.join(mogi.VARIABLE_NAMES)}"
            )
        i = index[name]
        sweep[name] = np.linspace(lo[i], hi[i], args.points)
    try:
        grid = mogi.GridSpec(sweep=sweep, fixed=fixed)
        output_std = dataset.values.std(axis=0)
        header, rows = mogi.sensitivity_profile(bounds, dataset.geometry, grid,
                                                output_std)
    except (mogi.UnknownVariableError, ValueError) as err:
        raise ConfigError(str(err)) from None

    manifest = make_manifest(
        "sensitivity",
        {"scenario": dataclasses.asdict(scenario_cfg), "sweep": sweep_names,
         "fixed": fixed, "points": args.points, "data": args.data},
        scenario_cfg.seed, inputs)
    outdir = resolve_outdir(_out_root(args, sections.get("paths", {})),
                            "sensitivity", manifest, args.force)
    tableio.write_csv(os.path.join(outdir, "sensitivity.csv"), header, rows)
    print(outdir)
    return 0


def cmd_report(args) -> int:
    stations = [s.strip() for s in args.stations.split(",")] if args.stations else None
    outdir = args.out or os.path.join(args.run, "figures")
    try:
        written = report.render_report(args.run, outdir, stations=stations,
                                       deterministic=args.deterministic)
    except FileNotFoundError as err:
        raise ConfigError(f"report inputs missing: {err}") from None
    except ValueError as err:
        raise ConfigError(str(err)) from None
    for path in written:
        print(path)
    return 0


# -- parser ------------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter,
                     argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> _Parser:
    parser = _Parser(prog="pila", description=__doc__,
                     formatter_class=_HelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_data=True):
        p.add_argument("--config", help="YAML config file (sections: scenario, "
                                        "model, train, paths)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-root", help=f"artifact root (default 'runs', env "
                                          f"{ENV_OUT_ROOT})")
        p.add_argument("--force", action="store_true",
                       help="reuse an existing output directory")
        if with_data:
            p.add_argument("--data", help="dataset directory from gen-data")

    def sub_parser(name, help_text):
        return sub.add_parser(name, help=help_text, formatter_class=_HelpFormatter)

    p = sub_parser("gen-data", "generate a synthetic dataset")
    common(p, with_data=False)
    p.set_defaults(func=cmd_gen_data)

    def train_like(p):
        common(p)
        p.add_argument("--window", type=int, nargs=2, metavar=("START", "STOP"),
                       help="held-out day range (required for loaded series "
                            "without an event window)")
        p.add_argument("--rank", type=int, help="residual rank override")
        p.add_argument("--epochs", type=int, help="epoch count override")
        p.add_argument("--batch-size", type=int, dest="batch_size",
                       help="batch size override")
        p.add_argument("--kind", choices=trainer.MODEL_KINDS,
                       help="model kind override")

    p = sub_parser("train", "train a model")
    train_like(p)
    p.set_defaults(func=cmd_train)

    p = sub_parser("eval", "evaluate a checkpoint over the event window")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz path")
    p.add_argument("--window", type=int, nargs=2, metavar=("START", "STOP"),
                   help="day range override for the evaluation window")
    p.set_defaults(func=cmd_eval)

    p = sub_parser("sweep", "train/evaluate one run per axis value")
    train_like(p)
    p.add_argument("--axis", required=True, choices=trainer.SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values (e.g. 1,4,8)")
    p.add_argument("--workers", type=int,
                   help=f"parallel sweep workers (env {ENV_WORKERS})")
    p.set_defaults(func=cmd_sweep)

    p = sub_parser("sensitivity", "standardized forward-model gradient table")
    common(p)
    p.add_argument("--sweep", required=True,
                   help="one or two variable names, comma-separated "
                        f"({', '.join(mogi.VARIABLE_NAMES)})")
    p.add_argument("--fixed", action="append", metavar="NAME=VALUE",
                   help="fix a non-swept variable (physical units); repeatable")
    p.add_argument("--points", type=int, default=25, help="grid resolution")
    p.set_defaults(func=cmd_sensitivity)

    p = sub_parser("report", "render SVG figures from eval CSVs")
    p.add_argument("--run", required=True, help="eval output directory")
    p.add_argument("--out", help="figure directory (default <run>/figures)")
    p.add_argument("--stations", help="comma-separated stations (default all)")
    p.add_argument("--deterministic", action="store_true",
                   help="suppress timestamps for byte-stable SVGs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except TrainingDivergedError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
