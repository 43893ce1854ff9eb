"""``pushbench``: run a push-recovery sweep and write its results."""
from __future__ import annotations

import argparse
import logging
import sys
import time

from . import bench
from .config import ConfigError, load_config
from .sim import TIMING_TAGS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def build_parser():
    p = argparse.ArgumentParser(
        prog="pushbench",
        description="Sweep base pushes over magnitude, direction, gait timing and strategy.",
        epilog=f"Worker processes: set {bench.WORKERS_ENV} (default 1).",
    )
    p.add_argument("--config", help="YAML file with model, controller and sim sections (default: bundled biped)")
    p.add_argument(
        "--magnitudes", default="10,30,50,70,90", help="comma list in N, or start:stop:count evenly spaced with both ends included"
    )
    p.add_argument("--angles", default="12", help="number of evenly spaced directions, or a comma list in degrees (default 12)")
    p.add_argument("--timings", default=",".join(TIMING_TAGS), help="comma list of T1..T4")
    p.add_argument("--strategies", default="proposed,baseline", help="comma list of proposed, baseline, no_avoidance, apf")
    p.add_argument("--trials-per-cell", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--format", default="csv", help="comma list of csv, json, polar")
    p.add_argument("--full-scale", action="store_true", help="25 magnitudes x 50 directions (10,000 trials for two strategies)")
    p.add_argument("--quiet", action="store_true")
    return p


def _split(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def make_spec(args):
    if args.full_scale:
        base = bench.full_sweep(args.seed)
        magnitudes, angles = base.magnitudes, base.angles
    else:
        magnitudes, angles = bench.parse_magnitudes(args.magnitudes), bench.parse_angles(args.angles)
    return bench.SweepSpec(magnitudes, angles, _split(args.timings), _split(args.strategies), args.trials_per_cell, args.seed)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    say = (lambda *a: None) if args.quiet else (lambda *a: print(*a, file=sys.stderr, flush=True))
    try:
        spec = make_spec(args)
        formats = _split(args.format)
        unknown = [f for f in formats if f not in bench.EXPORT_FORMATS]
        if unknown or not formats:
            raise bench.SweepError(f"unknown output format(s): {', '.join(unknown) or '(none)'}")
        cfg = load_config(args.config)
        workers = bench.worker_count()
    except (ConfigError, bench.SweepError, OSError) as exc:
        print(f"pushbench: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    say(f"pushbench: {spec.n_trials} trials on {workers} worker(s)")
    start = time.monotonic()

    def progress(done, total):
        say(f"  {done}/{total} trials, {time.monotonic() - start:.0f} s")

    outcomes = bench.run_sweep(spec, cfg.model, cfg.controller, cfg.sim, workers, progress)
    metrics = None
    if "proposed" in spec.strategies and "baseline" in spec.strategies:
        metrics = bench.compute_metrics(outcomes)
        print(metrics.format())
    try:
        paths = bench.export(outcomes, metrics, args.out, formats)
    except bench.ExportError as exc:
        print(f"pushbench: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in paths:
        say(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
