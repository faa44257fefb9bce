"""Command line entry points: world, run, sweep, ate."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .codec import load_world, save_world
from .config import ExperimentConfig, load_config
from .errors import CloudlocError
from .harness import SWEEP_AXES, run_experiment, sweep
from .metrics import compute_ate
from .world import generate_world


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    return ExperimentConfig()


def cmd_world(args) -> int:
    cfg = _config_from_args(args)
    truth = generate_world(cfg.world)
    save_world(truth, args.out)
    print(f"world: {len(truth.times)} samples, {len(truth.landmarks)} landmarks, "
          f"{len(truth.map_points)} map points -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    truth = load_world(args.world) if args.world else None
    metrics = run_experiment(cfg, out_dir=args.out, truth=truth)
    print(f"ate_median={metrics.ate_median:.6f} m ate_std={metrics.ate_std:.6f} m "
          f"keyframes={metrics.keyframes} up={metrics.up_rate:.0f} B/s down={metrics.down_rate:.0f} B/s")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    values = [float(v) for v in args.values.split(",")]
    rows = sweep(cfg, args.axis, values, seeds=args.seeds, out_dir=args.out)
    for value, s, med, std in rows:
        print(f"{args.axis}={value} seed={s} ate_median={med:.6f} ate_std={std:.6f}")
    return 0


def _read_trajectory(path):
    times, positions = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            times.append(float(row["time"]))
            positions.append([float(row["x"]), float(row["y"]), float(row["z"])])
    return np.asarray(times), np.asarray(positions)


def cmd_ate(args) -> int:
    et, ep = _read_trajectory(args.est)
    gt, gp = _read_trajectory(args.gt)
    result = compute_ate(et, ep, gt, gp, max_dt=args.max_dt)
    print(f"ate_median={result.median:.6f} m ate_std={result.std:.6f} m pairs={len(result.errors)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudloc",
        description="Deterministic client-cloud visual-inertial localization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("world", help="generate and save a world container")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", required=True, help="output world file")
    p.set_defaults(func=cmd_world)

    p = sub.add_parser("run", help="run a single experiment")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--world", help="reuse a saved world container")
    p.add_argument("--out", help="output directory for metrics and CSVs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run an axis sweep")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", help="output directory for the sweep CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ate", help="offline ATE between two trajectory CSVs")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--max-dt", type=float, default=0.01)
    p.set_defaults(func=cmd_ate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CloudlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
