"""Push-recovery sweeps: trial scheduling, paired success metrics and exports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .controller import STRATEGIES, ControllerConfig
from .sim import TIMING_TAGS, DisturbanceSpec, SimConfig, TrialOutcome, run_trial, trial_push_time, warm_starts

WORKERS_ENV = "PUSHBENCH_WORKERS"
UNDEFINED = None  # ratio whose denominator is zero
UNDEFINED_TEXT = "undefined"
DESK_MAGNITUDES = (10.0, 30.0, 50.0, 70.0, 90.0)
LATERAL_BANDS_DEG = ((60.0, 120.0), (240.0, 300.0))

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "trial_id",
    "strategy",
    "timing",
    "angle_deg",
    "magnitude_N",
    "success",
    "failure_cause",
    "min_clearance_m",
    # beyond the headline columns, so a re-import restores every field
    "min_base_height_m",
    "angle_rad",
    "seed",
    "failure_time_s",
    "push_time_s",
    "qp_failures",
    "steps",
)
POLAR_COLUMNS = ("angle_deg", "max_magnitude_N", "timing", "strategy")
METRIC_COLUMNS = (
    "timing",
    "trials",
    "successes_baseline",
    "successes_proposed",
    "successes_both",
    "sr_baseline",
    "sr_proposed",
    "eta_p_given_b",
    "eta_b_given_p",
    "improvement",
)


class SweepError(ValueError):
    """Invalid sweep description."""


class ExportError(OSError):
    """An output file could not be written."""


# -- sweep description --------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """One push condition; strategies sharing a cell share its trial id and seed."""

    index: int
    magnitude: float
    angle: float
    timing: str
    repetition: int
    trial_id: str
    seed: int

    @property
    def disturbance(self):
        return DisturbanceSpec(self.magnitude, self.angle, self.timing)


@dataclass(frozen=True)
class SweepSpec:
    magnitudes: tuple
    angles: tuple  # rad
    timings: tuple = TIMING_TAGS
    strategies: tuple = ("proposed", "baseline")
    trials_per_cell: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("magnitudes", "angles", "timings", "strategies"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.magnitudes and self.angles and self.timings and self.strategies):
            raise SweepError("every sweep axis needs at least one value")
        if self.trials_per_cell < 1:
            raise SweepError("trials per cell must be at least 1")
        for m in self.magnitudes:
            if not 10.0 <= float(m) <= 100.0:
                raise SweepError(f"magnitude {m} N lies outside [10, 100] N")
        for a in self.angles:
            if not math.isfinite(float(a)):
                raise SweepError(f"angle {a} is not finite")
        for t in self.timings:
            if t not in TIMING_TAGS:
                raise SweepError(f"unknown timing tag '{t}', expected a subset of {', '.join(TIMING_TAGS)}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise SweepError(f"unknown strategy '{s}', expected a subset of {', '.join(STRATEGIES)}")
        for name in ("magnitudes", "angles", "timings", "strategies"):
            values = getattr(self, name)
            if len(set(values)) != len(values):
                raise SweepError(f"duplicate entries in {name}")

    @property
    def n_trials(self):
        return len(self.cells()) * len(self.strategies)

    def cells(self):
        """Push conditions in a fixed order (timing, angle, magnitude, repetition)."""
        out = []
        for timing in self.timings:
            for angle in self.angles:
                for magnitude in self.magnitudes:
                    for rep in range(self.trials_per_cell):
                        tid = trial_id(timing, angle, magnitude, rep)
                        out.append(Cell(len(out), float(magnitude), float(angle), timing, rep, tid, cell_seed(self.seed, tid)))
        return out


def trial_id(timing, angle, magnitude, repetition=0):
    return f"{timing}-a{math.degrees(angle) % 360.0:07.3f}-m{magnitude:07.3f}-r{repetition}"


def cell_seed(master_seed, tid):
    """Seed that depends only on the master seed and the cell identity."""
    digest = hashlib.sha256(f"{int(master_seed)}|{tid}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parse_magnitudes(text):
    """``start:stop:count`` (inclusive, evenly spaced) or a comma list, in N."""
    text = text.strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise SweepError(f"magnitude range '{text}' must be start:stop:count")
            start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
            if count < 1:
                raise SweepError("magnitude count must be at least 1")
            if count == 1:
                return (start,)
            return tuple(float(v) for v in np.linspace(start, stop, count))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        if isinstance(exc, SweepError):
            raise
        raise SweepError(f"cannot parse magnitudes '{text}'") from exc


def parse_angles(text):
    """An integer N gives N evenly spaced directions from 0; a comma list is in degrees."""
    text = text.strip()
    try:
        if "," not in text and "." not in text:
            n = int(text)
            if n < 1:
                raise SweepError("angle count must be at least 1")
            return tuple(2.0 * math.pi * k / n for k in range(n))
        return tuple(math.radians(float(v)) for v in text.split(",") if v.strip())
    except ValueError as exc:
        if isinstance(exc, SweepError):
            raise
        raise SweepError(f"cannot parse angles '{text}'") from exc


def desk_sweep(seed=0, strategies=("proposed", "baseline")):
    """5 magnitudes x 12 directions x 4 timings per strategy."""
    return SweepSpec(DESK_MAGNITUDES, parse_angles("12"), TIMING_TAGS, strategies, 1, seed)


def full_sweep(seed=0, strategies=("proposed", "baseline")):
    """25 magnitudes x 50 directions x 4 timings: 10,000 trials for two strategies."""
    return SweepSpec(parse_magnitudes("10:100:25"), parse_angles("50"), TIMING_TAGS, strategies, 1, seed)


# -- execution ---------------------------------------------------------------------


def worker_count(default=1):
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise SweepError(f"{WORKERS_ENV} must be a positive integer, got '{raw}'") from exc
    if n < 1:
        raise SweepError(f"{WORKERS_ENV} must be a positive integer, got '{raw}'")
    return n


def _error_outcome(cell, strategy, exc):
    log.warning("trial %s (%s) raised %s: %s", cell.trial_id, strategy, type(exc).__name__, exc)
    return TrialOutcome(
        success=False,
        failure_cause="trial_error",
        min_base_height=math.nan,
        min_clearance=math.nan,
        strategy=strategy,
        timing=cell.timing,
        magnitude=cell.magnitude,
        angle=cell.angle,
        seed=cell.seed,
        trial_id=cell.trial_id,
    )


def _run_cell(model, cc, sim_cfg, cell, warm):
    try:
        out = run_trial(model, cc, cell.disturbance, cell.seed, sim_cfg, warm_start=warm)
    except Exception as exc:  # noqa: BLE001 - a crash is a recorded failure
        return _error_outcome(cell, cc.strategy, exc)
    return dataclasses.replace(out, trial_id=cell.trial_id)


def _run_group(task):
    """Run the cells of one (strategy, timing) group, sharing a warm-up when possible."""
    model, cc, sim_cfg, cells = task
    warm = None
    if sim_cfg.initial_velocity_noise == 0 and cells:
        try:
            t_push = trial_push_time(cc, cells[0].disturbance, sim_cfg)
            warm = warm_starts(model, cc, [t_push], sim_cfg)[t_push]
        except Exception:  # noqa: BLE001 - fall back to independent runs
            warm = None
    return [(cell.index, _run_cell(model, cc, sim_cfg, cell, warm)) for cell in cells]


def _tasks(spec, model, controller_config, sim_config, workers):
    cells = spec.cells()
    by_timing = defaultdict(list)
    for cell in cells:
        by_timing[cell.timing].append(cell)
    n_groups = len(by_timing) * len(spec.strategies)
    # Split groups further only when there are idle workers; each chunk pays its own warm-up.
    chunks = max(1, -(-2 * workers // n_groups)) if workers > 1 else 1
    tasks = []
    for strategy in spec.strategies:
        cc = controller_config.with_strategy(strategy)
        for timing in spec.timings:
            group = by_timing[timing]
            size = -(-len(group) // chunks)
            for start in range(0, len(group), size):
                tasks.append((strategy, (model, cc, sim_config, group[start : start + size])))
    return tasks


def run_sweep(spec: SweepSpec, model, controller_config: ControllerConfig | None = None, sim_config: SimConfig | None = None, workers=None, progress=None):
    """One outcome per (cell, strategy), ordered by strategy then cell.

    Results depend only on the spec and configs, never on ``workers``.
    ``progress(done, total)`` is called after each finished group.
    """
    controller_config = controller_config or ControllerConfig()
    sim_config = sim_config or SimConfig()
    workers = worker_count() if workers is None else int(workers)
    tasks = _tasks(spec, model, controller_config, sim_config, workers)
    total = spec.n_trials
    results = {}
    done = 0

    def collect(strategy, pairs):
        nonlocal done
        for index, outcome in pairs:
            results[(strategy, index)] = outcome
        done += len(pairs)
        if progress is not None:
            progress(done, total)

    if workers <= 1 or len(tasks) <= 1:
        for strategy, task in tasks:
            collect(strategy, _run_group(task))
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            futures = [(strategy, task, pool.submit(_run_group, task)) for strategy, task in tasks]
            for strategy, task, fut in futures:
                try:
                    pairs = fut.result()
                except Exception as exc:  # noqa: BLE001 - a dead worker fails its cells, not the sweep
                    pairs = [(cell.index, _error_outcome(cell, strategy, exc)) for cell in task[3]]
                collect(strategy, pairs)
    n_cells = len(spec.cells())
    return [results[(s, i)] for s in spec.strategies for i in range(n_cells)]


# -- metrics -----------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    timing: str
    trials: int
    successes_baseline: int
    successes_proposed: int
    successes_both: int

    @property
    def sr_baseline(self):
        return self.successes_baseline / self.trials if self.trials else UNDEFINED

    @property
    def sr_proposed(self):
        return self.successes_proposed / self.trials if self.trials else UNDEFINED

    @property
    def eta_p_given_b(self):
        """Share of baseline successes that the proposed strategy also recovers."""
        return self.successes_both / self.successes_baseline if self.successes_baseline else UNDEFINED

    @property
    def eta_b_given_p(self):
        return self.successes_both / self.successes_proposed if self.successes_proposed else UNDEFINED

    @property
    def improvement(self):
        """Relative success-rate gain as a fraction (0.5 means 50 %)."""
        if not self.successes_baseline:
            return UNDEFINED
        return (self.successes_proposed - self.successes_baseline) / self.successes_baseline

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple
    proposed: str = "proposed"
    baseline: str = "baseline"

    def row(self, timing):
        for r in self.rows:
            if r.timing == timing:
                return r
        raise KeyError(timing)

    @property
    def timings(self):
        return tuple(r.timing for r in self.rows)

    def format(self):
        def pct(v):
            return f"{100.0 * v:8.2f}" if v is not UNDEFINED else f"{UNDEFINED_TEXT:>8}"

        lines = [f"{'timing':<7}{'trials':>7}{'SR_b %':>9}{'SR_p %':>9}{'eta_p|b':>9}{'eta_b|p':>9}{'impr %':>9}"]
        for r in self.rows:
            lines.append(
                f"{r.timing:<7}{r.trials:>7} {pct(r.sr_baseline)} {pct(r.sr_proposed)} {pct(r.eta_p_given_b)} {pct(r.eta_b_given_p)} {pct(r.improvement)}"
            )
        return "\n".join(lines)


def pair_key(outcome):
    if outcome.trial_id:
        return outcome.trial_id
    return trial_id(outcome.timing, outcome.angle, outcome.magnitude) + f"-s{outcome.seed}"


def _row(label, proposed, baseline):
    if set(proposed) != set(baseline):
        raise ValueError(f"outcomes for '{label}' are not paired cell by cell between the two strategies")
    succ_p = {k for k, ok in proposed.items() if ok}
    succ_b = {k for k, ok in baseline.items() if ok}
    return MetricsRow(label, len(proposed), len(succ_b), len(succ_p), len(succ_p & succ_b))


def compute_metrics(outcomes, proposed="proposed", baseline="baseline", overall=True):
    """Success rates and conditional ratios per timing, from paired outcomes.

    Timings appear in tag order; ``overall`` appends an ``all`` row pooling
    every timing.
    """
    groups = defaultdict(lambda: ({}, {}))
    for o in outcomes:
        if o.strategy not in (proposed, baseline):
            continue
        side = groups[o.timing][0 if o.strategy == proposed else 1]
        key = pair_key(o)
        if key in side:
            raise ValueError(f"duplicate outcome for trial '{key}' under strategy '{o.strategy}'")
        side[key] = bool(o.success)
    if not groups:
        raise ValueError(f"no outcomes for strategies '{proposed}' and '{baseline}'")
    order = sorted(groups, key=lambda t: (TIMING_TAGS.index(t) if t in TIMING_TAGS else len(TIMING_TAGS), t))
    rows = [_row(t, *groups[t]) for t in order]
    if overall and len(rows) > 1:
        rows.append(
            MetricsRow(
                "all",
                sum(r.trials for r in rows),
                sum(r.successes_baseline for r in rows),
                sum(r.successes_proposed for r in rows),
                sum(r.successes_both for r in rows),
            )
        )
    return MetricsTable(tuple(rows), proposed, baseline)


def is_lateral(angle):
    deg = math.degrees(angle) % 360.0
    return any(lo - 1e-9 <= deg <= hi + 1e-9 for lo, hi in LATERAL_BANDS_DEG)


def lateral_outcomes(outcomes):
    """Pushes within 30 degrees of either side direction."""
    return [o for o in outcomes if is_lateral(o.angle)]


# -- export ------------------------------------------------------------------------


def _num(v):
    if v is None:
        return ""
    return repr(float(v))


def outcome_row(o: TrialOutcome):
    return {
        "trial_id": pair_key(o),
        "strategy": o.strategy,
        "timing": o.timing,
        "angle_deg": _num(o.angle_deg),
        "magnitude_N": _num(o.magnitude),
        "success": "true" if o.success else "false",
        "failure_cause": o.failure_cause,
        "min_clearance_m": _num(o.min_clearance),
        "min_base_height_m": _num(o.min_base_height),
        "angle_rad": _num(o.angle),
        "seed": str(o.seed),
        "failure_time_s": _num(o.failure_time),
        "push_time_s": _num(o.push_time),
        "qp_failures": str(o.qp_failures),
        "steps": str(o.steps),
    }


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)  # keep the file strict JSON
    return v


def outcome_json(o: TrialOutcome):
    return {
        "trial_id": pair_key(o),
        "strategy": o.strategy,
        "timing": o.timing,
        "angle_deg": _json_value(o.angle_deg),
        "magnitude_N": _json_value(o.magnitude),
        "success": bool(o.success),
        "failure_cause": o.failure_cause,
        "min_clearance_m": _json_value(o.min_clearance),
        "min_base_height_m": _json_value(o.min_base_height),
        "angle_rad": _json_value(o.angle),
        "seed": o.seed,
        "failure_time_s": o.failure_time,
        "push_time_s": o.push_time,
        "qp_failures": o.qp_failures,
        "steps": o.steps,
    }


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _opt_float(text):
    return float(text) if text not in ("", None) else None


def _from_record(rec):
    angle = rec.get("angle_rad")
    angle = float(angle) if angle not in ("", None) else math.radians(float(rec["angle_deg"]))
    success = rec["success"] if isinstance(rec["success"], bool) else _parse_bool(rec["success"])
    return TrialOutcome(
        success=success,
        failure_cause=rec["failure_cause"],
        min_base_height=float(rec.get("min_base_height_m", "nan")),
        min_clearance=float(rec["min_clearance_m"]),
        strategy=rec["strategy"],
        timing=rec["timing"],
        magnitude=float(rec["magnitude_N"]),
        angle=angle,
        seed=int(rec.get("seed") or 0),
        failure_time=_opt_float(rec.get("failure_time_s")),
        push_time=_opt_float(rec.get("push_time_s")),
        qp_failures=int(rec.get("qp_failures") or 0),
        steps=int(rec.get("steps") or 0),
        trial_id=rec["trial_id"],
    )


def _open_for_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as exc:
        raise ExportError(f"cannot write '{path}': {exc.strerror or exc}") from exc


def write_csv(outcomes, path):
    with _open_for_write(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for o in outcomes:
            writer.writerow(outcome_row(o))
    return Path(path)


def read_csv(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS[:8] if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(missing)}")
        return [_from_record(rec) for rec in reader]


def _metric_text(v):
    if v is UNDEFINED:
        return UNDEFINED_TEXT
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics_csv(metrics: MetricsTable, path):
    with _open_for_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in metrics.rows:
            writer.writerow([_metric_text(v) for v in r.as_dict().values()])
    return Path(path)


def write_json(outcomes, metrics: MetricsTable | None, path):
    doc = {"outcomes": [outcome_json(o) for o in outcomes]}
    if metrics is not None:
        doc["metrics"] = {
            "proposed": metrics.proposed,
            "baseline": metrics.baseline,
            "rows": [r.as_dict() for r in metrics.rows],
        }
    with _open_for_write(path) as fh:
        json.dump(doc, fh, indent=1, allow_nan=False)
    return Path(path)


def read_json(path):
    doc = json.loads(Path(path).read_text())
    return [_from_record({k: (str(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v) for k, v in rec.items()}) for rec in doc["outcomes"]]


def polar_points(outcomes):
    """Largest recovered magnitude per (angle, timing, strategy); successes only."""
    best = {}
    for o in outcomes:
        if not o.success:
            continue
        key = (round(o.angle_deg % 360.0, 9), o.timing, o.strategy)
        best[key] = max(best.get(key, -math.inf), o.magnitude)
    order = sorted(best, key=lambda k: (k[2], TIMING_TAGS.index(k[1]) if k[1] in TIMING_TAGS else 99, k[0]))
    return [(angle, best[(angle, timing, strategy)], timing, strategy) for angle, timing, strategy in order]


def write_polar(outcomes, path):
    with _open_for_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(POLAR_COLUMNS)
        for angle, mag, timing, strategy in polar_points(outcomes):
            writer.writerow([repr(angle), repr(float(mag)), timing, strategy])
    return Path(path)


EXPORT_FORMATS = ("csv", "json", "polar")


def export(outcomes, metrics: MetricsTable | None, out_dir, formats=("csv",)):
    """Write the requested formats into ``out_dir`` and return the written paths.

    ``csv`` writes ``outcomes.csv`` plus ``metrics.csv`` when metrics are
    given, ``json`` writes ``outcomes.json`` and ``polar`` writes
    ``polar.csv``.
    """
    if not outcomes:
        raise ValueError("nothing to export")
    unknown = [f for f in formats if f not in EXPORT_FORMATS]
    if unknown:
        raise ValueError(f"unknown export format(s) {', '.join(unknown)}")
    out_dir = Path(out_dir)
    written = []
    if "csv" in formats:
        written.append(write_csv(outcomes, out_dir / "outcomes.csv"))
        if metrics is not None:
            written.append(write_metrics_csv(metrics, out_dir / "metrics.csv"))
    if "json" in formats:
        written.append(write_json(outcomes, metrics, out_dir / "outcomes.json"))
    if "polar" in formats:
        written.append(write_polar(outcomes, out_dir / "polar.csv"))
    return written
