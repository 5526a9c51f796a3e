"""Command-line entry points: gen-data, train, run, sweep.

Every command writes a ``manifest.json`` next to its outputs with the
resolved configuration and a content hash of its inputs. Plot data is
emitted as long-format CSV (t, series, variant, value); there is no
built-in plotting.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .kinematics import generate_corpus
from .nets import TrainingConfig
from .predictor import LaneChangePredictor, trace_channels, trace_group
from .signals import load_trace, trace_arrays, write_trace
from .sim import ScenarioError, Scenario, load_scenario, parse_scenario, run_scenario

log = logging.getLogger("platoon_smpc")

PLOT_SERIES = ("delta", "v", "a", "pc")
PLOT_HEADER = ("t", "series", "variant", "value")
CYCLE_FIELDS = ("t", "variant", "delta", "delta_ctrl", "gap", "v", "a", "u", "pc", "mode", "cost", "feasible", "preceding")


class CliError(RuntimeError):
    pass


def _hash_inputs(parts: Sequence[bytes]) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(hashlib.sha256(p).digest())
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}") from None
    return out


def write_manifest(out: Path, command: str, config_path, seed, inputs: Sequence[bytes], resolved, started: float) -> dict:
    man = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "seed": seed,
        "input_hash": _hash_inputs(inputs),
        "output_dir": str(out),
        "resolved_config": resolved,
        "wall_clock_s": round(time.time() - started, 3),
    }
    _dump(out / "manifest.json", man)
    return man


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return d


# ---- gen-data ---------------------------------------------------------------

GEN_KEYS = {"n_maneuvers", "n_straight", "n_curved", "lane_width"}


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _read_config(args.config)
    bad = sorted(set(cfg) - GEN_KEYS)
    if bad:
        raise CliError(f"unknown gen-data config key(s): {', '.join(bad)}")
    n = args.n_maneuvers if args.n_maneuvers is not None else cfg.get("n_maneuvers", 90)
    if not isinstance(n, int) or n < 1:
        raise CliError("n_maneuvers must be a positive integer")
    seed = args.seed if args.seed is not None else 0
    resolved = {
        "n_maneuvers": n,
        "n_straight": cfg.get("n_straight"),
        "n_curved": cfg.get("n_curved"),
        "lane_width": cfg.get("lane_width", 3.7),
    }
    out = _prepare_out(Path(args.out))
    corpus = generate_corpus(n, seed=seed, n_straight=resolved["n_straight"],
                             n_curved=resolved["n_curved"], lane_width=resolved["lane_width"])
    for name, recs in corpus:
        with open(out / f"{name}.csv", "w", newline="") as fh:
            write_trace(recs, fh)
    write_manifest(out, "gen-data", args.config, seed, [json.dumps(resolved, sort_keys=True).encode()], resolved, started)
    log.info("wrote %d traces to %s", len(corpus), out)
    return 0


# ---- train ------------------------------------------------------------------

TRAIN_KEYS = {"epochs", "learning_rate", "momentum", "patience", "split", "narx_use_yaw", "hidden_units"}


def load_corpus(data_dir: Path):
    files = sorted(Path(data_dir).glob("*.csv"))
    if not files:
        raise CliError(f"no trace CSVs in {data_dir}")
    traces, groups, blobs = [], [], []
    for f in files:
        raw = f.read_bytes()
        blobs.append(f.name.encode() + b"\0" + raw)
        for seg in load_trace(raw):
            if len(seg) < 2:
                continue
            traces.append(trace_channels(seg))
            groups.append(trace_group(f.stem))
    return traces, groups, blobs


def cmd_train(args) -> int:
    started = time.time()
    cfg = _read_config(args.config)
    bad = sorted(set(cfg) - TRAIN_KEYS)
    if bad:
        raise CliError(f"unknown train config key(s): {', '.join(bad)}")
    seed = args.seed if args.seed is not None else 0
    tc_kwargs = {k: cfg[k] for k in ("epochs", "learning_rate", "momentum", "patience") if k in cfg}
    if "split" in cfg:
        tc_kwargs["split"] = tuple(cfg["split"])
    if args.epochs is not None:
        tc_kwargs["epochs"] = args.epochs
    tcfg = TrainingConfig(seed=seed, **tc_kwargs)
    narx_yaw = bool(cfg.get("narx_use_yaw", True))
    hidden = int(cfg.get("hidden_units", 20))
    traces, groups, blobs = load_corpus(Path(args.data))
    out = _prepare_out(Path(args.out))
    pred = LaneChangePredictor.fit(traces, tcfg, narx_use_yaw=narx_yaw, hidden_units=hidden, groups=groups)
    pred.save(out / "model.json")
    _dump(out / "report.json", pred.metrics)
    resolved = {
        "split": list(tcfg.split), "epochs": tcfg.epochs, "learning_rate": tcfg.learning_rate,
        "momentum": tcfg.momentum, "patience": tcfg.patience, "narx_use_yaw": narx_yaw,
        "hidden_units": hidden, "data": str(args.data),
    }
    write_manifest(out, "train", args.config, seed, blobs + [json.dumps(resolved, sort_keys=True).encode()], resolved, started)
    return 0


# ---- run --------------------------------------------------------------------


def _scenario_from_args(args) -> Scenario:
    if args.config is None:
        raise CliError("--config (scenario file) is required")
    sc = load_scenario(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "model", None):
        changes["predictor_model_path"] = str(args.model)
    elif sc.predictor.model_path and not os.path.isabs(sc.predictor.model_path):
        changes["predictor_model_path"] = str(Path(args.config).parent / sc.predictor.model_path)
    return sc.replace(**changes) if changes else sc


def _model_bytes(sc: Scenario) -> bytes:
    if sc.predictor.model_path and os.path.exists(sc.predictor.model_path):
        return Path(sc.predictor.model_path).read_bytes()
    return b""


def write_cycles(result, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CYCLE_FIELDS)
        for variant, leg in result.legs.items():
            for i in range(len(leg.t)):
                w.writerow([
                    repr(leg.t[i]), variant, repr(leg.delta[i]), repr(leg.delta_ctrl[i]), repr(leg.gap[i]),
                    repr(leg.v[i]), repr(leg.a[i]), repr(leg.u[i]), repr(leg.pc[i]), leg.mode[i],
                    repr(leg.cost[i]), int(leg.feasible[i]), leg.preceding[i],
                ])


def write_plot_data(result, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        for series in PLOT_SERIES:
            for variant, leg in result.legs.items():
                for t, val in zip(leg.t, getattr(leg, series)):
                    w.writerow([repr(t), series, variant, repr(float(val))])


def result_summary(result) -> dict:
    return {"scenario": result.scenario.name, "metrics": result.metrics}


def cmd_run(args) -> int:
    started = time.time()
    sc = _scenario_from_args(args)
    out = _prepare_out(Path(args.out))
    result = run_scenario(sc)
    write_cycles(result, out / "cycles.csv")
    write_plot_data(result, out / "plot_data.csv")
    _dump(out / "metrics.json", result_summary(result))
    resolved = sc.to_dict()
    write_manifest(out, "run", args.config, sc.seed,
                   [json.dumps(resolved, sort_keys=True).encode(), _model_bytes(sc)], resolved, started)
    return 0


# ---- sweep ------------------------------------------------------------------


def parse_grid(items: Sequence[str], grid_file=None) -> Dict[str, list]:
    grid: Dict[str, list] = {}
    if grid_file is not None:
        g = _read_config(grid_file)
        for k, v in g.items():
            if not isinstance(v, list) or not v:
                raise CliError(f"grid entry {k!r} must be a non-empty list")
            grid[k] = v
    for item in items or ():
        if "=" not in item:
            raise CliError(f"--param expects key=v1,v2,... got {item!r}")
        k, vals = item.split("=", 1)
        values = [json.loads(v) for v in vals.split(",") if v.strip()]
        if not values:
            raise CliError(f"--param {k} has no values")
        grid[k.strip()] = values
    if not grid:
        raise CliError("empty parameter grid")
    return grid


def _sweep_cell(payload):
    sc_dict, changes = payload
    sc = parse_scenario(sc_dict).replace(**changes)
    return run_scenario(sc).metrics


def cmd_sweep(args) -> int:
    started = time.time()
    sc = _scenario_from_args(args)
    grid = parse_grid(args.param, args.grid)
    keys = sorted(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    for c in cells:  # validate every cell before running any
        sc.replace(**c)
    out = _prepare_out(Path(args.out))
    payloads = [(sc.to_dict(), c) for c in cells]
    jobs = max(1, args.jobs or 1)
    if jobs == 1:
        results = [_sweep_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_cell, payloads))
    rows = []
    for cell, metrics in zip(cells, results):
        for variant, m in metrics.items():
            rows.append({**{k: cell[k] for k in keys}, "variant": variant, **m})
    metric_keys = list(results[0]["smpc"].keys())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*keys, "variant", *metric_keys])
        for r in rows:
            w.writerow([r[k] for k in keys] + [r["variant"]] + ["" if r[m] is None else r[m] for m in metric_keys])
    _dump(out / "sweep.json", {"grid": grid, "cells": [{"params": c, "metrics": m} for c, m in zip(cells, results)]})
    resolved = {"scenario": sc.to_dict(), "grid": grid}
    write_manifest(out, "sweep", args.config, sc.seed,
                   [json.dumps(resolved, sort_keys=True).encode(), _model_bytes(sc)], resolved, started)
    return 0


# ---- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="platoon-smpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="write synthetic lane-change and road traces")
    common(g, "JSON with n_maneuvers / n_straight / n_curved / lane_width")
    g.add_argument("--n-maneuvers", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and calibrate the predictor")
    common(t, "JSON training options (epochs, learning_rate, split, ...)")
    t.add_argument("--data", required=True, help="directory of trace CSVs")
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run one paired SMPC / MPC scenario")
    common(r, "scenario JSON file")
    r.add_argument("--model", help="predictor model (overrides predictor_model_path)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="cross-product parameter sweep of a scenario")
    common(s, "scenario JSON file")
    s.add_argument("--model", help="predictor model (overrides predictor_model_path)")
    s.add_argument("--grid", help="JSON object mapping dotted keys to value lists")
    s.add_argument("--param", action="append", help="dotted.key=v1,v2,... (repeatable)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("PLATOON_SMPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
