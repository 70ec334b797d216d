#!/usr/bin/env python3
"""
harness.py — Command-line face of the SplitVFL testbed.

Runs experiments from a JSON config, one complete training run per seed (and
per sweep value), then aggregates and writes report.csv / report.json.
Finished seeds are cached under <out>/runs/, so an interrupted run or sweep
resumes where it stopped; failed seeds are recorded and retried next time.

Usage:
    python3 backend/harness.py validate --config configs/income-hassle.json
    python3 backend/harness.py run --config configs/income-hassle.json
    python3 backend/harness.py run --config configs/synth10-hassle.json --seed 0 --seed 1
    python3 backend/harness.py sweep --config configs/income-hassle.json --axis top_layers --values 1 2 3 4
    python3 backend/harness.py sweep --config configs/synth10-hassle.json --axis sigma_g --values 0.0001 0.002
    python3 backend/harness.py report --out runs/income-hassle

Exit codes: 0 success, 1 every seed failed, 2 invalid configuration.
Env: VFL_WORKERS sets the default worker count.
"""
from __future__ import annotations

import os

# single-threaded BLAS in every worker
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import json
import logging
import sys
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from config import (
    ExperimentConfig,
    SWEEP_AXES,
    config_from_dict,
    config_hash,
    load_config,
    parse_axis_value,
    to_dict,
    with_override,
)
from data import PROJECT_ROOT
from errors import ConfigurationError, VFLError
from hijack import run_hassle
from report import (
    ExperimentReport,
    emit_report,
    failed_row,
    format_summary,
    load_report,
    new_report,
    row_from_result,
    write_timings,
)
from run_lock import OutputLock

log = logging.getLogger("harness")

RUNS_DIR = PROJECT_ROOT / "runs"
DEFAULT_WORKERS = int(os.environ.get("VFL_WORKERS", "1"))


def setup_logging(out_dir: Optional[Path], verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "harness.log", encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s  %(levelname)-7s  %(message)s",
        handlers=handlers,
        force=True,
    )


# ---------------------------------------------------------------------------
# Per-seed worker (called by multiprocessing.Pool)
# ---------------------------------------------------------------------------

def _cache_path(out_dir: Path, digest: str, seed: int) -> Path:
    return out_dir / "runs" / f"{digest[:16]}-seed{seed}.json"


def run_point(task: Tuple[Dict[str, Any], Optional[str], Any, int, str]) -> Dict[str, Any]:
    """Worker: one seed of one config. Returns {"row", "seconds", "cached"}."""
    raw, axis, value, seed, out = task
    config = config_from_dict(raw)
    out_dir = Path(out)
    digest = config_hash(config)
    cache = _cache_path(out_dir, digest, seed)
    if cache.exists():
        cached = json.loads(cache.read_text())
        if cached.get("row", {}).get("status") == "ok":
            cached["cached"] = True
            return cached
    artifacts = out_dir / "artifacts" / digest[:16]
    artifacts.mkdir(parents=True, exist_ok=True)
    try:
        result = run_hassle(config, seed, artifacts_dir=artifacts)
        row = row_from_result(result)
        seconds = result.seconds
    except VFLError as e:
        log.warning("seed %d failed (%s): %s", seed, type(e).__name__, e)
        row = failed_row(seed, config.attack.mode, f"{type(e).__name__}: {e}")
        seconds = 0.0
    if axis is not None:
        row["axis"] = axis
        row["value"] = value
    entry = {"config_hash": digest, "seed": seed, "row": row, "seconds": seconds}
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(json.dumps(entry, indent=2, sort_keys=True))
    entry["cached"] = False
    return entry


def run_tasks(tasks: Sequence[Tuple], workers: int) -> List[Dict[str, Any]]:
    """Results in task order whatever the worker count."""
    if workers <= 1 or len(tasks) <= 1:
        return [run_point(t) for t in tqdm(tasks, desc="Seeds", unit="run")]
    with Pool(processes=min(workers, len(tasks))) as pool:
        return list(tqdm(pool.imap(run_point, tasks), total=len(tasks), desc="Seeds", unit="run"))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, out_dir: Path, seeds: Optional[Sequence[int]] = None,
                   workers: int = 1) -> Tuple[ExperimentReport, List[Dict[str, Any]]]:
    seeds = list(seeds) if seeds else list(config.seeds)
    raw = to_dict(config)
    tasks = [(raw, None, None, s, str(out_dir)) for s in seeds]
    results = run_tasks(tasks, workers)
    report = new_report(config)
    report.rows = [r["row"] for r in results]
    return report, results


def sweep(config: ExperimentConfig, axis: str, values: Sequence[Any], out_dir: Path,
          seeds: Optional[Sequence[int]] = None,
          workers: int = 1) -> Tuple[ExperimentReport, List[Dict[str, Any]]]:
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"{axis!r} is not sweepable (expected one of {sorted(SWEEP_AXES)})")
    seeds = list(seeds) if seeds else list(config.seeds)
    points = [(v, with_override(config, axis, v)) for v in values]
    tasks = [(to_dict(cfg), axis, v, s, str(out_dir)) for v, cfg in points for s in seeds]
    results = run_tasks(tasks, workers)
    report = new_report(config, axis=axis)
    report.rows = [r["row"] for r in results]
    return report, results


def _finish(report: ExperimentReport, results: List[Dict[str, Any]], out_dir: Path) -> int:
    csv_path, json_path = emit_report(report, out_dir)
    write_timings(out_dir, [(str(r["row"].get("value", "")) if report.axis else "run",
                             r["seed"], r["seconds"]) for r in results])
    ok = sum(1 for r in report.rows if r.get("status") == "ok")
    cached = sum(1 for r in results if r.get("cached"))

    print(f"\n{'='*60}")
    print(f"  Report: {report.config.get('name')}" + (f" — sweep over {report.axis}" if report.axis else ""))
    print(f"{'='*60}")
    print(f"  Config hash:  {report.config_hash[:16]}")
    print(f"  Seeds ok:     {ok}/{len(report.rows)}  ({cached} from cache)")
    for line in format_summary(report):
        print(line)
    print(f"  CSV:          {csv_path}")
    print(f"  JSON:         {json_path}")
    return 0 if ok > 0 else 1


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="SplitVFL attack/defense testbed",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"Sweepable axes: {', '.join(sorted(SWEEP_AXES))}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        if needs_config:
            p.add_argument("--config", required=True, help="Experiment config (JSON)")
        p.add_argument("--seed", type=int, action="append", default=None,
                       help="Run only this seed (repeatable; default: seeds in config)")
        p.add_argument("--out", type=str, default=None,
                       help="Output directory (default: runs/<config name>)")
        p.add_argument("--workers", type=int, default=DEFAULT_WORKERS,
                       help=f"Parallel runs (default: $VFL_WORKERS or {DEFAULT_WORKERS})")
        p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    common(sub.add_parser("run", help="Run every seed of a config"))
    sp = sub.add_parser("sweep", help="Run a config once per value of one axis")
    common(sp)
    sp.add_argument("--axis", required=True, help="Parameter to sweep")
    sp.add_argument("--values", required=True, nargs="+", help="Axis values")
    rp = sub.add_parser("report", help="Re-emit and print an existing report")
    rp.add_argument("--out", required=True, help="Output directory holding report.json")
    vp = sub.add_parser("validate", help="Validate a config and print it resolved")
    vp.add_argument("--config", required=True, help="Experiment config (JSON)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)

    if args.command == "validate":
        try:
            config = load_config(args.config)
        except ConfigurationError as e:
            print(f"  Invalid config: {e}", file=sys.stderr)
            return 2
        print(json.dumps(to_dict(config), indent=2, sort_keys=True))
        print(f"\n  Config hash: {config_hash(config)}")
        return 0

    if args.command == "report":
        out_dir = Path(args.out)
        try:
            config, summary = load_report(out_dir / "report.json")
        except (OSError, VFLError) as e:
            print(f"  Cannot read report: {e}", file=sys.stderr)
            return 2
        report = ExperimentReport(summary["config"], summary["config_hash"],
                                  summary["rows"], summary.get("axis"), summary["version"])
        holder = OutputLock(out_dir).live_holder()
        if holder is None:
            emit_report(report, out_dir)
        else:
            print(f"  Run in progress: {holder.describe()}; report files left as they are")
        print(f"  {config.name}  ({summary['config_hash'][:16]}, version {summary['version']})")
        for line in format_summary(report):
            print(line)
        return 0

    try:
        config = load_config(args.config)
        values = [parse_axis_value(args.axis, v) for v in args.values] \
            if args.command == "sweep" else None
        if args.command == "sweep" and args.axis not in SWEEP_AXES:
            raise ConfigurationError(f"{args.axis!r} is not sweepable")
    except ConfigurationError as e:
        print(f"  Invalid config: {e}", file=sys.stderr)
        return 2

    out_dir = Path(args.out) if args.out else RUNS_DIR / config.name
    setup_logging(out_dir, args.verbose)
    lock = OutputLock(out_dir, f"harness.py {args.command}", config_hash(config))
    try:
        lock.acquire()
    except RuntimeError as e:
        print(f"\n  Lock error: {e}")
        return 1

    try:
        log.info("%s %s (%s) -> %s", args.command, config.name, config_hash(config)[:16], out_dir)
        if args.command == "run":
            report, results = run_experiment(config, out_dir, args.seed, args.workers)
        else:
            report, results = sweep(config, args.axis, values, out_dir, args.seed, args.workers)
        return _finish(report, results, out_dir)
    except ConfigurationError as e:
        print(f"  Invalid config: {e}", file=sys.stderr)
        return 2
    finally:
        lock.release()


if __name__ == "__main__":
    sys.exit(main())
