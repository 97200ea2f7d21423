"""Command-line entry points: train, compare, export.

Config files use a flat ``section.key = value`` grammar with ``#`` comments;
values are strings, integers, floats or booleans. Unknown keys are errors.
Runs write into an output directory: manifest.json (written before training
starts), metrics.csv (one row per stage), scatter/ (training-set dumps),
checkpoints/ and summary.json.

Exit codes: 0 success, 1 configuration error, 2 training abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import engine as eg
from .engine import TrainConfig, TrainingAbort, config_hash

__all__ = ["ConfigError", "parse_config", "cmd_train", "cmd_compare",
           "cmd_export", "main"]


class ConfigError(Exception):
    pass


# key in file -> (attribute on TrainConfig, type)
CONFIG_KEYS = {
    "problem": ("problem", str),
    "engine.stages": ("stages", int),
    "engine.j": (("j_min", "j_max"), int),
    "engine.j_min": ("j_min", int),
    "engine.j_max": ("j_max", int),
    "engine.m": ("m", int),
    "engine.n_r": ("n_r", int),
    "engine.n_b": ("n_b", int),
    "engine.lr_theta": ("lr_theta", float),
    "engine.lr_alpha": ("lr_alpha", float),
    "engine.gamma": ("gamma", float),
    "engine.beta": ("beta", float),
    "engine.beta_decay": ("beta_decay", float),
    "engine.beta_period": ("beta_period", int),
    "engine.regen": ("regen", str),
    "engine.seed": ("seed", int),
    "engine.rar_pool_factor": ("rar_pool_factor", int),
    "engine.rar_append": ("rar_append", int),
    "engine.checkpoint_every": ("checkpoint_every", int),
    "engine.scatter_every": ("scatter_every", int),
    "engine.resample_boundary": ("resample_boundary", bool),
    "engine.divergence_threshold": ("divergence_threshold", float),
    "eval.var_points": ("eval_points", int),
    "eval.error_points": ("error_points", int),
    "net.depth": ("net_depth", int),
    "net.width": ("net_width", int),
    "flow.layers": ("flow_layers", int),
    "flow.width": ("flow_width", int),
    "flow.prior": ("flow_prior", str),
}


def _parse_value(raw, want, key):
    raw = raw.strip()
    if want is bool:
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if want is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if want is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    return raw


def parse_config(path):
    """Read a config file into a validated TrainConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        attrs, want = CONFIG_KEYS[key]
        parsed = _parse_value(raw, want, key)
        if isinstance(attrs, tuple):
            for attr in attrs:
                values.setdefault(attr, parsed)
        else:
            values[attrs] = parsed
    if "problem" not in values:
        raise ConfigError("problem required (set `problem = one_peak` etc.)")
    try:
        return TrainConfig(**values).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _fmt(x):
    return format(float(x), ".17g")


# metrics.csv schema: wall-clock time is kept out of the per-stage table so
# reruns of the same seed are byte-identical; it lives in summary.json
METRIC_COLUMNS = ("stage", "min_loss", "boundary_loss", "max_objective",
                  "error", "var_r2", "sliced_w", "beta")


def write_metrics_csv(path, history):
    lines = [",".join(METRIC_COLUMNS)]
    for rec in history:
        lines.append(",".join([str(rec.stage)] + [
            _fmt(getattr(rec, col)) for col in METRIC_COLUMNS[1:]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_csv(path):
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    return rows


def write_scatter_csv(path, stage, points):
    dim = points.shape[1]
    cols = ",".join(["stage"] + [f"x{i+1}" for i in range(dim)])
    lines = [f"# columns: {cols}"]
    for row in points:
        lines.append(",".join([str(stage)] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class RunWriter:
    """Observer wiring a training run to its output directory."""

    def __init__(self, out_dir, config):
        self.out = Path(out_dir)
        self.config = config
        (self.out / "scatter").mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def on_start(self, run, train_set):
        if self.config.scatter_every >= 1:
            write_scatter_csv(self.out / "scatter" / "stage_0000.csv", 0,
                              train_set)

    def on_stage(self, run, rec, train_set):
        nxt = rec.stage + 1
        if nxt % self.config.scatter_every == 0 or nxt == self.config.stages:
            write_scatter_csv(self.out / "scatter" / f"stage_{nxt:04d}.csv",
                              nxt, train_set)
        if nxt % self.config.checkpoint_every == 0 or nxt == self.config.stages:
            eg.save_checkpoint(self.out / "checkpoints" / f"stage_{nxt:04d}.npz",
                               self.config, eg.run_state(run, rec.stage))

    def on_abort(self, run):
        eg.save_checkpoint(self.out / "checkpoints" / "abort.npz",
                           self.config, eg.run_state(run, len(run.history)))


TRAINERS = {"aas": eg.train_aas, "pinn": eg.train_uniform_pinn,
            "rar": eg.train_rar}


def cmd_train(config_path, method, seed=None, out_dir=None):
    config = parse_config(config_path)
    if seed is not None:
        config.seed = seed
    if method not in TRAINERS:
        raise ConfigError(f"unknown method {method!r}; use aas, pinn or rar")
    out = Path(out_dir) if out_dir else Path(
        f"runs/{config.problem}-{method}-s{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    config.out_dir = str(out)

    manifest = {
        "version": __version__,
        "config_hash": config_hash(config),
        "method": method,
        "problem": config.problem,
        "seed": config.seed,
        "config": {f.name: getattr(config, f.name) for f in fields(config)},
        "layout": {"metrics": "metrics.csv", "summary": "summary.json",
                   "scatter": "scatter/", "checkpoints": "checkpoints/"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                       encoding="utf-8")

    writer = RunWriter(out, config)
    t0 = time.perf_counter()
    try:
        result = TRAINERS[method](config, observer=writer)
    except TrainingAbort as abort:
        if abort.result is not None:
            write_metrics_csv(out / "metrics.csv", abort.result.history)
        print(f"training aborted: {abort}", file=sys.stderr)
        return 2
    wallclock = time.perf_counter() - t0

    write_metrics_csv(out / "metrics.csv", result.history)
    summary = {
        "final_error": result.history[-1].error,
        "min_var": min(rec.var_r2 for rec in result.history),
        "final_sliced_w": result.history[-1].sliced_w,
        "wallclock": wallclock,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                      encoding="utf-8")
    print(f"{method} on {config.problem}: final error "
          f"{summary['final_error']:.6e} ({wallclock:.1f}s) -> {out}")
    return 0


def cmd_compare(run_dirs, out_path="comparison.csv"):
    cells = {}
    methods, problems = set(), set()
    for d in run_dirs:
        d = Path(d)
        summary_path = d / "summary.json"
        manifest_path = d / "manifest.json"
        if not summary_path.exists() or not manifest_path.exists():
            raise FileNotFoundError(f"run directory {d} is missing "
                                    f"summary.json or manifest.json")
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        method, problem = manifest["method"], manifest["problem"]
        methods.add(method)
        problems.add(problem)
        cells[(method, problem)] = summary["final_error"]

    methods = sorted(methods)
    problems = sorted(problems)
    lines = [",".join(["method"] + problems)]
    print("method".ljust(8) + "".join(p.rjust(14) for p in problems))
    for m in methods:
        row = [m]
        shown = m.ljust(8)
        for p in problems:
            val = cells.get((m, p))
            row.append("" if val is None else _fmt(val))
            shown += ("-" if val is None else f"{val:.3e}").rjust(14)
        lines.append(",".join(row))
        print(shown)
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


EXPORTS = {"error_curve": ("error",), "variance_curve": ("var_r2",)}


def cmd_export(run_dir, what):
    run = Path(run_dir)
    out = run / "export"
    if what in EXPORTS:
        metrics = run / "metrics.csv"
        if not metrics.exists():
            raise FileNotFoundError(f"{metrics} is missing")
        rows = read_metrics_csv(metrics)
        col = EXPORTS[what][0]
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"# columns: stage,{col}"]
        lines += [f"{row['stage']},{row[col]}" for row in rows]
        (out / f"{what}.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")
    elif what == "scatter":
        stage_files = sorted((run / "scatter").glob("stage_*.csv"))
        if not stage_files:
            raise FileNotFoundError(f"no scatter dumps in {run / 'scatter'}")
        out.mkdir(parents=True, exist_ok=True)
        body = []
        header = None
        for f in stage_files:
            lines = f.read_text(encoding="utf-8").splitlines()
            header = lines[0]
            body += lines[1:]
        (out / "scatter.csv").write_text("\n".join([header] + body) + "\n",
                                         encoding="utf-8")
    else:
        raise ConfigError(f"unknown export {what!r}")
    print(f"wrote {out / (what + '.csv')}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="aaspde",
        description="Adaptive-sampling PDE training runs and reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training method")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--method", required=True, choices=sorted(TRAINERS))
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="tabulate finished runs")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", default="comparison.csv")

    p_exp = sub.add_parser("export", help="write figure-ready CSV files")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--what", required=True,
                       choices=("error_curve", "variance_curve", "scatter"))

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.method, args.seed, args.out)
        if args.command == "compare":
            return cmd_compare(args.run_dirs, args.out)
        return cmd_export(args.run_dir, args.what)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
