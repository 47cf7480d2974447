"""Command-line entry point: ``agro-pinn <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import NIR, RED, Dataset, SynthConfig, batch_arrays, load_dataset, save_dataset, synth_generate
from .errors import AgroPinnError, ConfigError, DataError, NumericError
from .fao56 import CropParameters, read_crop_parameters, simulate_etx
from .meteo import STANDARD_PRESSURE, read_weather_csv
from .metrics import REPORT_COLUMNS, evaluate, r2_score
from .nn.model import ModelConfig, load_checkpoint, save_checkpoint
from .physloss import LossConfig
from .train import (
    Batch,
    EnsembleConfig,
    TrainConfig,
    ensemble_predict,
    holdout_split,
    split,
    train_ensemble,
)
from .yieldloss import cumulative_yield

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "violation_rate")


# ------------------------------------------------------------------ config files

def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return raw


def parse_key_values(lines, source: str = "config") -> dict:
    """``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _fill(cls, values: dict, used: set, extra: dict | None = None):
    kwargs = dict(extra or {})
    for f in dataclasses.fields(cls):
        if f.name in values and f.name != "loss":
            default = f.default if f.default is not dataclasses.MISSING else None
            kwargs[f.name] = _coerce(f.name, values[f.name], default)
            used.add(f.name)
    return cls(**kwargs)


def build_configs(values: dict, seed: int | None = None):
    """Split flat key=value settings into model, train and ensemble configs.

    ``seed`` (from the file or ``--seed``) is the ensemble base seed; member
    ``i`` uses ``seed + i`` for both initialisation and shuffling.
    """
    values = dict(values)
    if seed is not None:
        values["base_seed"] = str(seed)
    elif "seed" in values:
        values["base_seed"] = values["seed"]
    used = {"seed"}
    loss = _fill(LossConfig, values, used)
    model = _fill(ModelConfig, {k: v for k, v in values.items() if k != "seed"}, used)
    train = _fill(TrainConfig, {k: v for k, v in values.items() if k != "seed"}, used, {"loss": loss})
    ens = _fill(EnsembleConfig, values, used)
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return model, train, ens


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_key_values(path.read_text().splitlines(), str(path))


def config_snapshot(*configs) -> dict:
    snap = {}
    for cfg in configs:
        snap.update({k: v for k, v in dataclasses.asdict(cfg).items()})
    return snap


# ------------------------------------------------------------------ output helpers

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path, command: str, config: dict, seeds: dict, inputs: list, outputs: list,
                   started: float) -> None:
    """Record what a run did; written atomically once the run has finished."""
    doc = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": time.time() - started,
    }
    _atomic_write(Path(path), json.dumps(doc, indent=2, default=str) + "\n")


def write_history(path, history) -> None:
    write_csv(path, HISTORY_COLUMNS, ([h[c] for c in HISTORY_COLUMNS] for h in history))


# ------------------------------------------------------------------ subcommands

def cmd_simulate_et(args) -> list:
    weather = read_weather_csv(args.weather)
    params = read_crop_parameters(args.crop) if args.crop else CropParameters()
    if args.fit_season:
        params = params.scaled_to(len(weather))
    trace = simulate_etx(weather, params, args.mode, args.pressure)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out)
    if trace.clamped_days:
        print(f"note: ET0 clamped to 0 on {len(trace.clamped_days)} day(s)", file=sys.stderr)
    write_manifest(f"{out}.manifest.json", "simulate-et",
                   {"mode": args.mode, "pressure": args.pressure, **dataclasses.asdict(params)},
                   {}, [args.weather] + ([args.crop] if args.crop else []), [out], args.started)
    return [out]


def cmd_gen_synth(args) -> list:
    values = read_config(args.config)
    values.update(parse_key_values(args.set or [], "--set"))
    values["seed"] = str(args.seed)
    used = set()
    cfg = _fill(SynthConfig, values, used)
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown synthetic config keys: {', '.join(unknown)}")
    dataset, truth = synth_generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    truth_path = Path(f"{out}.truth")
    truth.save(truth_path)
    write_manifest(f"{out}.manifest.json", "gen-synth", dataclasses.asdict(cfg), {"seed": cfg.seed},
                   [args.config] if args.config else [], [out, truth_path], args.started)
    return [out, truth_path]


def _save_members(out: Path, results, extra_meta=None) -> list:
    paths = []
    for i, res in enumerate(results):
        ckpt = out / f"member{i:02d}.ckpt.json"
        save_checkpoint(res.model, ckpt, {**res.meta(), **(extra_meta or {})})
        hist = out / f"member{i:02d}.history.csv"
        write_history(hist, res.history)
        paths += [ckpt, hist]
    return paths


def cmd_train(args) -> list:
    model_cfg, train_cfg, ens_cfg = build_configs(read_config(args.config), args.seed)
    dataset = load_dataset(args.data)
    _check_features(dataset, model_cfg)
    train, val = holdout_split(dataset, train_cfg.val_fraction, ens_cfg.base_seed)
    results = train_ensemble(train, val, model_cfg, train_cfg, ens_cfg, diag_dir=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = _save_members(out, results)
    write_manifest(out / "manifest.json", "train", config_snapshot(model_cfg, train_cfg, ens_cfg),
                   {"base_seed": ens_cfg.base_seed, "members": [ens_cfg.base_seed + i for i in range(ens_cfg.members)]},
                   [args.data] + ([args.config] if args.config else []), outputs, args.started)
    return outputs


def _check_features(dataset: Dataset, model_cfg: ModelConfig) -> None:
    if dataset.n_features != model_cfg.input_dim:
        raise ConfigError(f"input_dim={model_cfg.input_dim} but the dataset has {dataset.n_features} features")


def _prediction_rows(dataset: Dataset, pred, y_x):
    rows = []
    for i, s in enumerate(dataset.samples):
        rows.append([s.pixel_id, s.field_id, s.year, s.yield_actual, pred.yield_mean[i], pred.yield_sd[i],
                     pred.lower[i], pred.upper[i], pred.yield_loss[i], y_x])
    return rows


PREDICTION_COLUMNS = ("pixel_id", "field_id", "year", "yield_actual", "yield_pred", "yield_sd",
                      "lower_2sd", "upper_2sd", "yield_loss", "y_x")
SERIES_COLUMNS = ("pixel_id", "step", "date", "etx", "eta_mean", "eta_sd", "ky_mean", "ky_sd")


def _series_rows(dataset: Dataset, pred):
    for i, s in enumerate(dataset.samples):
        for t, d in enumerate(s.acquisitions):
            yield [s.pixel_id, t, d.isoformat(), s.etx_steps[t], pred.eta_mean[i, t], pred.eta_sd[i, t],
                   pred.ky_mean[i, t], pred.ky_sd[i, t]]


def cmd_cv(args) -> list:
    model_cfg, train_cfg, ens_cfg = build_configs(read_config(args.config), args.seed)
    dataset = load_dataset(args.data)
    _check_features(dataset, model_cfg)
    folds = split(dataset, args.strategy, args.k, seed=ens_cfg.base_seed, val_fraction=train_cfg.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    for fold in folds:
        train, val, test = dataset.subset(fold.train), dataset.subset(fold.val), dataset.subset(fold.test)
        results = train_ensemble(train, val, model_cfg, train_cfg, ens_cfg, diag_dir=out)
        y_x = results[0].y_x
        pred = ensemble_predict([r.model for r in results], Batch.from_samples(test.samples), y_x)
        report = evaluate(pred.yield_mean, test.yields())
        rows.append([fold.name, report.n, *report.as_row()])
        if args.save_predictions:
            path = out / f"{fold.name}.predictions.csv"
            write_csv(path, PREDICTION_COLUMNS, _prediction_rows(test, pred, y_x))
            outputs.append(path)
        print(f"{fold.name}: r2={report.r2:.3f} mae={report.mae:.3f}", file=sys.stderr)
    table = np.array([[np.nan if v is None else v for v in r[2:]] for r in rows], dtype=float)
    mean_row = ["mean", sum(r[1] for r in rows), *np.nanmean(table, axis=0)]
    metrics_path = out / "metrics.csv"
    write_csv(metrics_path, ("fold", "n", *REPORT_COLUMNS), rows + [mean_row])
    outputs.insert(0, metrics_path)
    write_manifest(out / "manifest.json", "cv", {**config_snapshot(model_cfg, train_cfg, ens_cfg),
                                                 "strategy": args.strategy, "k": args.k},
                   {"base_seed": ens_cfg.base_seed}, [args.data] + ([args.config] if args.config else []),
                   outputs, args.started)
    return outputs


def _checkpoint_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.ckpt.json"))
        elif p.exists():
            paths.append(p)
        else:
            raise DataError(f"checkpoint {p} does not exist")
    if not paths:
        raise DataError("no checkpoints found")
    return paths


def cmd_predict(args) -> list:
    paths = _checkpoint_paths(args.checkpoints)
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _ in loaded]
    y_x = args.y_x if args.y_x is not None else loaded[0][1].get("y_x")
    if y_x is None:
        raise ConfigError("checkpoint has no y_x; pass --y-x")
    dataset = load_dataset(args.data)
    _check_features(dataset, models[0].cfg)
    pred = ensemble_predict(models, Batch.from_samples(dataset.samples), float(y_x))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path, series_path = out / "predictions.csv", out / "series.csv"
    write_csv(pred_path, PREDICTION_COLUMNS, _prediction_rows(dataset, pred, y_x))
    write_csv(series_path, SERIES_COLUMNS, _series_rows(dataset, pred))
    write_manifest(out / "manifest.json", "predict", {"y_x": y_x, "members": len(models)}, {},
                   [args.data, *paths], [pred_path, series_path], args.started)
    return [pred_path, series_path]


def _grid_position(index: int, n: int):
    side = math.ceil(math.sqrt(n))
    return index // side, index % side


def cmd_report(args) -> list:
    """Plot-ready CSVs from ``predict`` output and the matching dataset."""
    dataset = load_dataset(args.data)
    src = Path(args.predictions)
    preds = {r["pixel_id"]: r for r in read_csv(src / "predictions.csv")}
    series = read_csv(src / "series.csv")
    missing = [s.pixel_id for s in dataset.samples if s.pixel_id not in preds]
    if missing:
        raise DataError(f"{len(missing)} dataset pixels have no prediction (first: {missing[0]})")
    index = {s.pixel_id: i for i, s in enumerate(dataset.samples)}
    x, etx, mask, y = batch_arrays(dataset.samples)
    eta = np.full(etx.shape, np.nan)
    ky = np.full(etx.shape, np.nan)
    for r in series:
        i, t = index.get(r["pixel_id"]), int(r["step"])
        if i is not None:
            eta[i, t], ky[i, t] = float(r["eta_mean"]), float(r["ky_mean"])
    y_x = float(next(iter(preds.values()))["y_x"])
    valid = mask & np.isfinite(eta)
    if not valid.any():
        raise DataError("no per-step predictions to report")
    # cumulative yield after each step (padded steps contribute nothing)
    cum = cumulative_yield(np.where(valid, ky, 0.0), np.where(valid, eta, 0.0), np.where(valid, etx, 0.0),
                           y_x, clamp=True)
    red, nir = x[..., RED], x[..., NIR]
    total = red + nir
    ndvi_vals = np.divide(nir - red, total, out=np.full(total.shape, np.nan), where=mask & (total > 0))
    out = Path(args.out)
    temporal, kyndvi = [], []
    for t in range(etx.shape[1]):
        m = valid[:, t]
        if not m.any():
            continue
        r2 = r2_score(cum[m, t], y[m]) if np.ptp(y[m]) > 0 else float("nan")
        temporal.append([t, etx[m, t].mean(), eta[m, t].mean(), (1.0 - cum[m, t] / y_x).mean(), r2])
        kyndvi.append([t, ky[m, t].mean(), ky[m, t].std(), np.nanmean(ndvi_vals[m, t])])
    paths = [out / "temporal.csv", out / "ky_ndvi.csv", out / "field_grid.csv"]
    write_csv(paths[0], ("step", "mean_etx_sim", "mean_eta_pred", "mean_yield_loss", "r2"), temporal)
    write_csv(paths[1], ("step", "mean_ky", "sd_ky", "mean_ndvi"), kyndvi)
    grid = []
    fields = dataset.fields()
    for f in np.unique(fields):
        members = np.flatnonzero(fields == f)
        for k, i in enumerate(members):
            s = dataset.samples[i]
            row, col = _grid_position(k, len(members))
            grid.append([f, row, col, s.yield_actual, float(preds[s.pixel_id]["yield_pred"])])
    write_csv(paths[2], ("field_id", "row", "col", "yield_actual", "yield_pred"), grid)
    write_manifest(out / "manifest.json", "report", {"y_x": y_x}, {}, [args.data, src], paths, args.started)
    return paths


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agro-pinn", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-et", help="daily ET0/Kc/ETx trace from a weather CSV")
    s.add_argument("--weather", required=True)
    s.add_argument("--crop", help="key=value crop parameter file")
    s.add_argument("--mode", choices=("single", "dual"), default="single")
    s.add_argument("--pressure", type=float, default=STANDARD_PRESSURE, help="kPa")
    s.add_argument("--fit-season", action="store_true", help="rescale stage lengths to the weather span")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate_et)

    s = sub.add_parser("gen-synth", help="synthetic dataset plus planted truth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key=value file with SynthConfig fields")
    s.add_argument("--set", nargs="*", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    for name, func, text in (("train", cmd_train, "train an ensemble on a dataset"),
                             ("cv", cmd_cv, "cross-validated metrics")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="key=value file with model/train/loss/ensemble fields")
        s.add_argument("--data", required=True)
        s.add_argument("--seed", type=int, help="ensemble base seed (overrides the config)")
        s.add_argument("--out", required=True)
        if name == "cv":
            s.add_argument("--strategy", choices=("kfold", "loyo"), default="kfold")
            s.add_argument("--k", type=int, default=10)
            s.add_argument("--save-predictions", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("predict", help="ensemble predictions with ±2σ bands")
    s.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or directories")
    s.add_argument("--data", required=True)
    s.add_argument("--y-x", type=float, help="override the Yx stored in the checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", help="plot-ready CSVs from predictions")
    s.add_argument("--predictions", required=True, help="directory written by predict")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.started = time.time()
    try:
        for path in args.func(args):
            print(path)
    except AgroPinnError as exc:
        message = " ".join(str(exc).split())
        print(f"error[{exc.category}]: {message}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error[data]: {' '.join(str(exc).split())}", file=sys.stderr)
        return DataError.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
