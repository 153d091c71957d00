"""Command-line front end: train / evaluate / forecast / verify / ablate.

One YAML run configuration drives everything; flags only pick the
subcommand, the config path, output locations, and seed/epoch overrides.
HIERMIX_VERBOSITY tunes status output (0 quiet, 1 default, 2 per-epoch).
Exit codes: 0 success, 1 bad input, 2 internal failure or failed checks.
Every artifact is written atomically (temp file, then rename) so a crashed
run never leaves half-written output behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np
import yaml

from . import autograd as ag
from .data import (
    SeriesDataset,
    SyntheticSpec,
    feature_dims,
    generate_synthetic,
    load_csv,
    partition,
    preprocess_counts,
)
from .hierarchy import load_hierarchy
from .metrics import QuantileGrid, evaluate, forecast_quantile_table
from .mixture import (
    PoissonMixtureForecast,
    full_forecast,
    sample_coherent,
    save_forecast_tables,
)
from .network import ModelConfig, PoissonMixtureNet
from .objectives import GroupingScheme
from .training import TrainConfig, retrain_shift, train


class UserError(Exception):
    """Bad configuration or input data; maps to exit code 1."""


# -- config loading --------------------------------------------------------

_TOP_KEYS = {"seed", "output_dir", "dataset", "model", "train", "metrics", "ablate"}
_DATASET_KEYS = {"csv", "hierarchy", "horizon", "frequency", "features", "start_date", "preprocess", "synthetic"}
_PREPROCESS_KEYS = {"mode", "scale_factor"}
_METRICS_KEYS = {"quantile_grid", "n_samples"}
_ABLATE_KEYS = {"k_values", "seeds"}
_TRAIN_EXTRA_KEYS = {"retrain"}


def _require_mapping(obj, where: str) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise UserError(f"{where} must be a mapping")
    return obj


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise UserError(f"unknown fields in {where}: {sorted(unknown)}")


class RunConfig:
    """Validated run configuration resolved against the config file's directory."""

    def __init__(self, doc: dict, base_dir: str):
        doc = _require_mapping(doc, "run config")
        _check_keys(doc, _TOP_KEYS, "run config")
        self.seed = int(doc.get("seed", 0))
        self.output_dir = os.path.join(base_dir, str(doc.get("output_dir", "out")))
        self.dataset_doc = _require_mapping(doc.get("dataset"), "dataset")
        _check_keys(self.dataset_doc, _DATASET_KEYS, "dataset")
        if not self.dataset_doc:
            raise UserError("run config needs a dataset section")
        self.base_dir = base_dir

        model_doc = _require_mapping(doc.get("model"), "model")
        try:
            self.model = ModelConfig(**{k: tuple(v) if k == "dilations" else v for k, v in model_doc.items()})
        except (TypeError, ValueError) as err:
            raise UserError(f"bad model section: {err}") from None

        train_doc = dict(_require_mapping(doc.get("train"), "train"))
        self.retrain = bool(train_doc.pop("retrain", True))
        self.grouping_ref = train_doc.pop("grouping", None)
        try:
            self.train = TrainConfig(**train_doc)
        except (TypeError, ValueError) as err:
            raise UserError(f"bad train section: {err}") from None

        metrics_doc = _require_mapping(doc.get("metrics"), "metrics")
        _check_keys(metrics_doc, _METRICS_KEYS, "metrics")
        self.quantile_grid = int(metrics_doc.get("quantile_grid", 99))
        self.n_samples = int(metrics_doc.get("n_samples", 200))

        ablate_doc = _require_mapping(doc.get("ablate"), "ablate")
        _check_keys(ablate_doc, _ABLATE_KEYS, "ablate")
        self.ablate_k = [int(k) for k in ablate_doc.get("k_values", [1, 4, 16])]
        self.ablate_seeds = [int(s) for s in ablate_doc.get("seeds", [0, 1, 2, 3, 4])]

    def build_dataset(self) -> SeriesDataset:
        doc = self.dataset_doc
        if "synthetic" in doc:
            if len(doc) > 1:
                raise UserError("a synthetic dataset section cannot mix with file-based fields")
            syn = _require_mapping(doc["synthetic"], "dataset.synthetic")
            try:
                spec = SyntheticSpec(**syn)
            except (TypeError, ValueError) as err:
                raise UserError(f"bad synthetic section: {err}") from None
            ds, _ = generate_synthetic(spec)
            return ds
        for key in ("csv", "hierarchy", "horizon"):
            if key not in doc:
                raise UserError(f"dataset section needs '{key}'")
        hierarchy = load_hierarchy(os.path.join(self.base_dir, doc["hierarchy"]))
        features = [os.path.join(self.base_dir, p) for p in doc.get("features", [])]
        ds = load_csv(
            os.path.join(self.base_dir, doc["csv"]),
            hierarchy,
            horizon=int(doc["horizon"]),
            frequency=doc.get("frequency"),
            feature_paths=features,
            start_date=doc.get("start_date"),
        )
        pre = doc.get("preprocess")
        if pre is not None:
            pre = _require_mapping(pre, "dataset.preprocess")
            _check_keys(pre, _PREPROCESS_KEYS, "dataset.preprocess")
            ds = preprocess_counts(ds, pre.get("mode", "round"), float(pre.get("scale_factor", 1.0)))
        elif not ds.is_count_panel():
            raise UserError("panel holds non-integer values; add a dataset.preprocess section")
        return ds

    def resolve_grouping(self, ds: SeriesDataset) -> TrainConfig:
        cfg = self.train
        ref = self.grouping_ref
        if ref is None:
            return cfg
        if not isinstance(ref, str) or ":" not in ref:
            raise UserError("train.grouping must look like 'level:<label>' or 'file:<path>'")
        kind, _, arg = ref.partition(":")
        if kind == "level":
            scheme = GroupingScheme.from_hierarchy_level(ds.hierarchy, arg)
        elif kind == "file":
            with open(os.path.join(self.base_dir, arg), "r", encoding="utf-8") as fh:
                scheme = GroupingScheme.from_yaml(fh.read(), ds.hierarchy.bottom_names)
        else:
            raise UserError(f"unknown grouping kind '{kind}'")
        return replace(cfg, grouping=scheme)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh.read())
    except OSError as err:
        raise UserError(f"cannot read config: {err}") from None
    except yaml.YAMLError as err:
        raise UserError(f"config is not valid YAML: {err}") from None
    return RunConfig(doc, os.path.dirname(os.path.abspath(path)))


# -- output helpers --------------------------------------------------------


def _atomic_write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_write_text(path, buf.getvalue())


def _fmt(value: float) -> str:
    return repr(float(value))


def _verbosity() -> int:
    """Status-print level from HIERMIX_VERBOSITY: 0 silences progress lines,
    1 is the default, 2 adds per-epoch training output. Result tables and the
    stderr error record are not affected."""
    try:
        return int(os.environ.get("HIERMIX_VERBOSITY", ""))
    except ValueError:
        return 1


def _say(msg: str, level: int = 1) -> None:
    if _verbosity() >= level:
        print(msg)


# -- subcommands -----------------------------------------------------------


def _build_model(run: RunConfig, ds: SeriesDataset, n_components: int | None = None, seed: int | None = None) -> PoissonMixtureNet:
    model_cfg = run.model
    if n_components is not None:
        model_cfg = replace(model_cfg, n_components=n_components)
    return PoissonMixtureNet(
        model_cfg, feature_dims(ds.features), ds.horizon, seed=run.seed if seed is None else seed
    )


def cmd_train(run: RunConfig) -> int:
    ds = run.build_dataset()
    cfg = replace(run.resolve_grouping(ds), rng_seed=run.seed if run.train.rng_seed == 0 else run.train.rng_seed)
    model = _build_model(run, ds, seed=cfg.rng_seed)
    result = train(model, ds, cfg)
    log_lines = [json.dumps(rec, sort_keys=True) for rec in result.curves]
    log_lines.append(
        json.dumps(
            {"event": "selected", "best_epoch": result.best_epoch, "best_val_scrps": result.best_val_scrps, "aborted": result.aborted},
            sort_keys=True,
        )
    )
    final = result.model
    if run.retrain and not result.aborted and result.best_epoch > 0:
        final = retrain_shift(replace(run.model, n_components=run.model.n_components), ds, cfg, result.best_epoch)
        log_lines.append(json.dumps({"event": "retrained", "epochs": result.best_epoch}, sort_keys=True))
    os.makedirs(run.output_dir, exist_ok=True)
    ag.save_tensors(os.path.join(run.output_dir, "checkpoint.bin"), final.state_arrays())
    _atomic_write_text(os.path.join(run.output_dir, "training_log.jsonl"), "\n".join(log_lines) + "\n")
    for rec in result.curves:
        _say(json.dumps(rec, sort_keys=True), level=2)
    _say(f"checkpoint: {os.path.join(run.output_dir, 'checkpoint.bin')}")
    _say(f"best epoch {result.best_epoch}, validation scrps {result.best_val_scrps:.6f}")
    return 0 if not result.aborted else 2


def _load_model(run: RunConfig, ds: SeriesDataset, checkpoint: str | None) -> PoissonMixtureNet:
    path = checkpoint or os.path.join(run.output_dir, "checkpoint.bin")
    if not os.path.exists(path):
        raise UserError(f"checkpoint not found: {path}")
    model = _build_model(run, ds)
    try:
        model.load_state(ag.load_tensors(path))
    except ValueError as err:
        raise UserError(f"checkpoint does not match the configured model: {err}") from None
    return model


def cmd_evaluate(run: RunConfig, checkpoint: str | None) -> int:
    ds = run.build_dataset()
    model = _load_model(run, ds, checkpoint)
    part = partition(ds)
    rates, weights = model.forward(ds.features, part.val_end - 1)
    forecast = PoissonMixtureForecast(weights.values, rates.values)
    report = evaluate(forecast, ds.hierarchy, ds.y, part.val_end, QuantileGrid.uniform(run.quantile_grid))
    _write_csv(
        os.path.join(run.output_dir, "report.csv"),
        ["level", "metric", "value"],
        [(label, metric, _fmt(value)) for label, metric, value in report.metric_rows()],
    )
    doc = {
        "overall": {"scrps": report.overall_scrps, "msse": report.overall_msse},
        "levels": {
            label: {"scrps": report.level_scrps[label], "msse": report.level_msse[label]}
            for label in report.level_scrps
        },
        "window": "test",
        "quantile_grid": run.quantile_grid,
    }
    _atomic_write_text(os.path.join(run.output_dir, "report.yaml"), yaml.safe_dump(doc, sort_keys=True))
    scale = 1.0 / ds.scale_factor
    _write_csv(
        os.path.join(run.output_dir, "quantiles.csv"),
        ["series_id", "tau", "q", "value"],
        ((name, tau, q, _fmt(v)) for name, tau, q, v in report.quantile_rows(scale)),
    )
    for label, metric, value in report.metric_rows():
        print(f"{label:>12}  {metric:>6}  {value:.6f}" if np.isfinite(value) else f"{label:>12}  {metric:>6}  nan")
    return 0


def cmd_forecast(run: RunConfig, checkpoint: str | None) -> int:
    ds = run.build_dataset()
    model = _load_model(run, ds, checkpoint)
    creation = ds.n_time - 1  # forecast the window after the panel ends
    rates, weights = model.forward(ds.features, creation)
    forecast = PoissonMixtureForecast(weights.values, rates.values)
    os.makedirs(run.output_dir, exist_ok=True)
    full = full_forecast(forecast, ds.hierarchy)
    save_forecast_tables(
        full,
        ds.hierarchy.row_names,
        os.path.join(run.output_dir, "forecast_rates.csv"),
        os.path.join(run.output_dir, "forecast_weights.csv"),
    )
    grid = QuantileGrid.uniform(run.quantile_grid)
    table = forecast_quantile_table(forecast, ds.hierarchy, grid)
    scale = 1.0 / ds.scale_factor
    rows = []
    for r, name in enumerate(ds.hierarchy.row_names):
        for t in range(ds.horizon):
            for qi, q in enumerate(grid.levels):
                rows.append((name, t + 1, float(q), _fmt(table[r, t, qi] * scale)))
    _write_csv(os.path.join(run.output_dir, "quantiles.csv"), ["series_id", "tau", "q", "value"], rows)
    samples = sample_coherent(forecast, ds.hierarchy, run.n_samples, rng_seed=run.seed)
    sample_rows = []
    for s in range(samples.shape[0]):
        for r, name in enumerate(ds.hierarchy.row_names):
            for t in range(ds.horizon):
                sample_rows.append((s, name, t + 1, _fmt(samples[s, r, t] * scale)))
    _write_csv(os.path.join(run.output_dir, "samples.csv"), ["sample", "series_id", "tau", "value"], sample_rows)
    _say(f"wrote forecasts for {len(ds.hierarchy.row_names)} rows to {run.output_dir}")
    return 0


def cmd_ablate(run: RunConfig) -> int:
    ds = run.build_dataset()
    cfg = run.resolve_grouping(ds)
    rows = []
    summary = []
    for k in run.ablate_k:
        scores = []
        for seed in run.ablate_seeds:
            seeded = replace(cfg, rng_seed=seed)
            model = _build_model(run, ds, n_components=k, seed=seed)
            result = train(model, ds, seeded)
            final = retrain_shift(replace(run.model, n_components=k), ds, seeded, result.best_epoch) if run.retrain and result.best_epoch > 0 else result.model
            part = partition(ds)
            r, w = final.forward(ds.features, part.val_end - 1)
            forecast = PoissonMixtureForecast(w.values, r.values)
            report = evaluate(forecast, ds.hierarchy, ds.y, part.val_end, QuantileGrid.uniform(run.quantile_grid))
            rows.append((k, seed, _fmt(report.overall_scrps)))
            scores.append(report.overall_scrps)
            _say(f"k={k} seed={seed} test scrps {report.overall_scrps:.6f}")
        summary.append((k, _fmt(float(np.mean(scores)))))
    _write_csv(os.path.join(run.output_dir, "ablation.csv"), ["n_components", "seed", "test_scrps"], rows)
    _write_csv(os.path.join(run.output_dir, "ablation_summary.csv"), ["n_components", "mean_test_scrps"], summary)
    return 0


def cmd_verify(run: RunConfig | None) -> int:
    from .verify_checks import run_all_checks

    results = run_all_checks()
    width = max(len(name) for name, _, _ in results)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
        if not ok:
            failed += 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 2


# -- entry point -----------------------------------------------------------


def _apply_overrides(run: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        run.seed = int(args.seed)
    if args.epochs is not None:
        run.train = replace(run.train, max_epochs=int(args.epochs))
    if args.output_dir is not None:
        run.output_dir = args.output_dir
    return run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hiermix",
        description="Coherent probabilistic forecasting for hierarchical count series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("train", True),
        ("evaluate", True),
        ("forecast", True),
        ("ablate", True),
        ("verify", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--epochs", type=int, default=None, help="override train.max_epochs")
        p.add_argument("--output-dir", default=None, help="override the output directory")
        if name in ("evaluate", "forecast"):
            p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <output_dir>/checkpoint.bin)")
    args = parser.parse_args(argv)

    try:
        run = None
        if args.config:
            run = _apply_overrides(load_run_config(args.config), args)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "evaluate":
            return cmd_evaluate(run, args.checkpoint)
        if args.command == "forecast":
            return cmd_forecast(run, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(run)
        return cmd_verify(run)
    except UserError as err:
        print(json.dumps({"error": "user", "message": str(err)}), file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as err:
        print(json.dumps({"error": "user", "message": f"{type(err).__name__}: {err}"}), file=sys.stderr)
        return 1
    except Exception as err:  # anything else is our bug, not the user's
        print(json.dumps({"error": "internal", "message": f"{type(err).__name__}: {err}"}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
