"""
Plot-ready data: tidy long-format tables, one per figure, for any plotting tool.
"""
import csv
import json
import os
import re

import click
import numpy as np

from audit import load_trajectory
from errors import TrajectoryError
from resources.common import Blueprint, abort, echo_config, handle_errors, output_path, require_path

blp = Blueprint("report", description="Figure data series.")

TRAJECTORY_SERIES = ("ppl_fp32", "gap_int4_pct", "gap_int8_pct", "lr_frac", "kurtosis")
FORK_SERIES = ("ppl_fp32", "gap_int4_pct", "gap_int8_pct", "lr")
SEED_DIR = re.compile(r"^seed_(\d+)$")

TABLES = {
    "trajectory": ("step", "phase", "series", "value"),
    "kurtosis_vs_gap": ("step", "phase", "kurtosis", "gap_int4_pct"),
    "fork": ("condition", "seed", "step", "series", "value"),
    "fork_bands": ("condition", "step", "series", "n", "mean", "std"),
}


def trajectory_series(points):
    return [
        {"step": p.step, "phase": p.phase, "series": name, "value": getattr(p, name)}
        for p in points for name in TRAJECTORY_SERIES if getattr(p, name) is not None
    ]


def kurtosis_vs_gap(points):
    return [
        {"step": p.step, "phase": p.phase, "kurtosis": p.kurtosis, "gap_int4_pct": p.gap_int4_pct}
        for p in points if p.kurtosis is not None and p.gap_int4_pct is not None
    ]


def fork_runs(fork_dir):
    """[(condition, seed, trajectory path)] found under a fork output directory."""
    runs = []
    for condition in sorted(os.listdir(fork_dir)):
        cond_dir = os.path.join(fork_dir, condition)
        if not os.path.isdir(cond_dir):
            continue
        seeds = []
        for entry in os.listdir(cond_dir):
            match = SEED_DIR.match(entry)
            path = os.path.join(cond_dir, entry, "trajectory.csv")
            if match and os.path.isfile(path):
                seeds.append((int(match.group(1)), path))
        runs.extend((condition, seed, path) for seed, path in sorted(seeds))
    return runs


def fork_series(fork_dir):
    rows = []
    for condition, seed, path in fork_runs(fork_dir):
        for p in load_trajectory(path):
            for name in FORK_SERIES:
                value = getattr(p, name)
                if value is not None:
                    rows.append({"condition": condition, "seed": seed, "step": p.step, "series": name, "value": value})
    return rows


def fork_bands(series_rows):
    """Mean and sample std across seeds of each (condition, step, series)."""
    grouped = {}
    for row in series_rows:
        grouped.setdefault((row["condition"], row["step"], row["series"]), []).append(row["value"])
    bands = []
    for (condition, step, series), values in sorted(grouped.items()):
        bands.append({
            "condition": condition, "step": step, "series": series, "n": len(values),
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else None,
        })
    return bands


def _cell(value):
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else value


def write_table(path, columns, rows, fmt):
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fmt == "json":
            json.dump(rows, f, indent=2)
            f.write("\n")
        else:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row[c]) for c in columns])
    return path


@blp.command("report")
@click.option("--trajectory", default=None, help="Trajectory from `audit` or `phases`.")
@click.option("--fork-dir", default=None, help="Output directory of `fork`.")
@click.pass_context
@handle_errors
def report(ctx, trajectory, fork_dir):
    """Write long-format series for the trajectory, kurtosis-vs-gap and fork comparison figures."""
    if trajectory is None and fork_dir is None:
        abort("Nothing to report: pass --trajectory and/or --fork-dir")

    tables = {}
    if trajectory is not None:
        points = load_trajectory(require_path(trajectory, "Trajectory"))
        tables["trajectory"] = trajectory_series(points)
        tables["kurtosis_vs_gap"] = kurtosis_vs_gap(points)
    if fork_dir is not None:
        series = fork_series(require_path(fork_dir, "Fork directory"))
        if not series:
            raise TrajectoryError(f"No fork trajectories under {fork_dir}")
        tables["fork"] = series
        tables["fork_bands"] = fork_bands(series)

    fmt = ctx.obj["FORMAT"]
    for name, rows in tables.items():
        path = write_table(output_path(ctx, "report", f"{name}.{fmt}"), TABLES[name], rows, fmt)
        click.echo(f"{len(rows)} rows -> {path}")
    echo_config(ctx, "report")
