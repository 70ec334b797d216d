#!/usr/bin/env python3
"""
report.py — Experiment reports: per-seed rows, aggregates, CSV/JSON emission.

report.csv   one row per seed (per sweep value), then `mean` and `std` rows;
             column order is COLUMNS (sweeps prepend `axis`, `value`);
             metrics not applicable to a mode are written as n/a
report.json  config hash, code version, resolved config, rows, aggregates
timings.csv  wall-clock per seed (kept out of the two reports so that a re-run
             of the same config and seeds is byte-identical)

Std is the population std (ddof=0) over the seeds that finished.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ExperimentConfig, config_from_dict, config_hash, to_dict
from errors import InputError

CODE_VERSION = "1.0.0"

STEALTH_COLUMNS = [
    f"{det}_{stat}"
    for det in ("pca_recon", "mahalanobis")
    for stat in ("pop_mean", "pop_std", "adv_max", "adv_mean", "adv_std")
]

COLUMNS = [
    "seed", "status", "mode",
    "lia_precision", "lia_precision_ds", "selected_count", "poison_rate",
    "asr", "mta", "clean_mta", "saliency_ratio",
    "h_adv_norm", "norm_cap", "clip_violations",
    "abl_flagged", "abl_overlap", "vflip_flag_rate", "anomaly_flag_rate",
] + STEALTH_COLUMNS + ["error"]

METRIC_COLUMNS = [c for c in COLUMNS if c not in ("seed", "status", "mode", "error")]
SWEEP_COLUMNS = ["axis", "value"]


@dataclass
class ExperimentReport:
    config: Dict[str, Any]
    config_hash: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    axis: Optional[str] = None
    version: str = CODE_VERSION

    @property
    def columns(self) -> List[str]:
        return (SWEEP_COLUMNS if self.axis else []) + COLUMNS


def _finite(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def row_from_result(result: Any) -> Dict[str, Any]:
    """Flatten a per-seed result (dataclass or dict) into a report row."""
    raw = asdict(result) if is_dataclass(result) else dict(result)
    row: Dict[str, Any] = {c: None for c in COLUMNS}
    for key in COLUMNS:
        if key in raw:
            row[key] = _finite(raw[key])
    for key, value in (raw.get("stealth") or {}).items():
        if key in row:
            row[key] = _finite(value)
    for key in ("saliency_trace", "lia_precision_curve", "substitutions_per_epoch"):
        value = raw.get(key)
        if isinstance(value, dict):
            value = {str(k): v for k, v in value.items()}
        elif isinstance(value, list):
            value = [_finite(v) for v in value]
        row[key] = value
    return row


def failed_row(seed: int, mode: str, message: str) -> Dict[str, Any]:
    row: Dict[str, Any] = {c: None for c in COLUMNS}
    row.update(seed=seed, status="failed", mode=mode, error=message)
    return row


def aggregate(rows: Sequence[Dict[str, Any]]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """(mean row, std row) over finished seeds; columns with no values stay None."""
    ok = [r for r in rows if r.get("status") == "ok"]
    mean_row: Dict[str, Any] = {c: None for c in COLUMNS}
    std_row: Dict[str, Any] = {c: None for c in COLUMNS}
    mean_row.update(seed="mean", status=f"{len(ok)}/{len(rows)}")
    std_row.update(seed="std", status=f"{len(ok)}/{len(rows)}")
    if rows:
        mean_row["mode"] = std_row["mode"] = rows[0].get("mode")
    for col in METRIC_COLUMNS:
        values = [r[col] for r in ok if r.get(col) is not None]
        if values:
            arr = np.asarray(values, dtype=np.float64)
            mean_row[col] = float(arr.mean())
            std_row[col] = float(arr.std())
    return mean_row, std_row


def _table(report: ExperimentReport) -> List[Dict[str, Any]]:
    """Rows in emission order: each group's seeds followed by its mean/std."""
    out: List[Dict[str, Any]] = []
    groups: Dict[Any, List[Dict[str, Any]]] = {}
    for row in report.rows:
        groups.setdefault(row.get("value") if report.axis else None, []).append(row)
    for value, rows in groups.items():
        out.extend(rows)
        for agg in aggregate(rows):
            if report.axis:
                agg.update(axis=report.axis, value=value)
            out.append(agg)
    return out


def emit_report(report: ExperimentReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _table(report)
    csv_path = out_dir / "report.csv"
    frame = pd.DataFrame([{c: r.get(c) for c in report.columns} for r in table],
                         columns=report.columns)
    frame.insert(0, "config_hash", report.config_hash)
    frame.to_csv(csv_path, index=False, float_format="%.12g", na_rep="n/a", lineterminator="\n")

    json_path = out_dir / "report.json"
    summary = {
        "config_hash": report.config_hash,
        "version": report.version,
        "axis": report.axis,
        "config": report.config,
        "columns": report.columns,
        "rows": report.rows,
        "aggregates": [r for r in table if r.get("seed") in ("mean", "std")],
    }
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, json_path


def write_timings(out_dir: Union[str, Path], timings: Sequence[Tuple[str, int, float]]) -> Path:
    path = Path(out_dir) / "timings.csv"
    pd.DataFrame(list(timings), columns=["point", "seed", "seconds"]).to_csv(
        path, index=False, float_format="%.3f", lineterminator="\n")
    return path


def load_report(path: Union[str, Path]) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    """Read report.json back; its config goes through the normal loader."""
    with open(path, encoding="utf-8") as f:
        summary = json.load(f)
    config = config_from_dict(summary["config"])
    if config_hash(config) != summary["config_hash"]:
        raise InputError(f"{path}: config hash mismatch")
    return config, summary


def new_report(config: ExperimentConfig, axis: Optional[str] = None) -> ExperimentReport:
    return ExperimentReport(to_dict(config), config_hash(config), axis=axis)


def format_summary(report: ExperimentReport) -> List[str]:
    """Aligned label/value lines for the terminal."""
    lines = []
    for row in _table(report):
        if row.get("seed") != "mean":
            continue
        prefix = f"{report.axis}={row.get('value')}  " if report.axis else ""
        parts = [f"{c} {row[c]:.4f}" for c in ("lia_precision", "asr", "mta", "clean_mta")
                 if row.get(c) is not None]
        lines.append(f"  {prefix}[{row['status']} ok]  " + "  ".join(parts))
    return lines
