import csv
import json
import re

import click

from audit import NUMERIC_COLUMNS, load_trajectory, phase3_correlation, segment_phases
from errors import StatsError
from resources.common import (Blueprint, echo_config, handle_errors, output_path, require_path, selector_from_options,
                              selector_options)
from schemas import KurtosisResultSchema, WelchResultSchema, WinRecordSchema
from stats import pairwise_wins, pearson, pooled_weight_kurtosis, welch_t
from weightstore import read_checkpoint

blp = Blueprint("stats", description="Kurtosis, correlation and two-sample comparisons.")


def read_values(path, column=None):
    """Numbers from one named CSV column (blank cells skipped), or separated by commas or whitespace."""
    with open(require_path(path, "Values file"), encoding="utf-8", newline="") as f:
        if column is None:
            tokens = [t for t in re.split(r"[,\s]+", f.read()) if t]
        else:
            reader = csv.DictReader(f)
            if column not in (reader.fieldnames or ()):
                raise StatsError(f"{path}: no column {column!r} in {reader.fieldnames}")
            tokens = [row[column] for row in reader if row[column]]
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise StatsError(f"{path}: {e}") from e


def write_result(ctx, name, document):
    path = output_path(ctx, f"{name}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")
    click.echo(json.dumps(document))
    return path


@blp.group("stats")
def stats():
    """Statistics over checkpoints, trajectories and per-seed results."""


@stats.command("kurtosis")
@click.argument("checkpoint")
@selector_options
@click.pass_context
@handle_errors
def kurtosis(ctx, checkpoint, include, exclude):
    """Excess kurtosis of every quantized weight of CHECKPOINT pooled together."""
    _, tensors = read_checkpoint(require_path(checkpoint, "Checkpoint"))
    result = pooled_weight_kurtosis(tensors, selector_from_options(include, exclude))
    write_result(ctx, "kurtosis", KurtosisResultSchema().dump(result))
    echo_config(ctx, "stats")


@stats.command("pearson")
@click.argument("trajectory")
@click.option("--x", "x_col", default="kurtosis", show_default=True, type=click.Choice(NUMERIC_COLUMNS))
@click.option("--y", "y_col", default="gap_int4_pct", show_default=True, type=click.Choice(NUMERIC_COLUMNS))
@click.option("--phase", default=None, type=click.IntRange(1, 3), help="Only rows of this phase.")
@click.pass_context
@handle_errors
def pearson_command(ctx, trajectory, x_col, y_col, phase):
    """Pearson r between two columns of TRAJECTORY."""
    points = load_trajectory(require_path(trajectory, "Trajectory"))
    if phase is not None and any(p.phase is None for p in points):
        segment_phases(points)
    if phase == 3 and (x_col, y_col) == ("kurtosis", "gap_int4_pct"):
        r = phase3_correlation(points)
        n = sum(1 for p in points if p.phase == 3 and p.kurtosis is not None and p.gap_int4_pct is not None)
    else:
        rows = [p for p in points if phase is None or p.phase == phase]
        pairs = [(getattr(p, x_col), getattr(p, y_col)) for p in rows]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        r = pearson([x for x, _ in pairs], [y for _, y in pairs])
        n = len(pairs)
    write_result(ctx, "pearson", {"x": x_col, "y": y_col, "phase": phase, "n": n, "r": r})
    echo_config(ctx, "stats")


@stats.command("welch")
@click.argument("sample_a")
@click.argument("sample_b")
@click.option("--column", default=None, help="CSV column to read from both files [default: bare lists of numbers].")
@click.pass_context
@handle_errors
def welch(ctx, sample_a, sample_b, column):
    """Welch's two-sided t-test of SAMPLE_A against SAMPLE_B (CSV files or lists of numbers)."""
    result = welch_t(read_values(sample_a, column), read_values(sample_b, column))
    write_result(ctx, "welch", WelchResultSchema().dump(result))
    echo_config(ctx, "stats")


@stats.command("wins")
@click.argument("challenger")
@click.argument("baseline")
@click.option("--higher-is-better", is_flag=True, help="Count larger values as wins.")
@click.option("--column", default=None, help="CSV column to read from both files [default: bare lists of numbers].")
@click.pass_context
@handle_errors
def wins(ctx, challenger, baseline, higher_is_better, column):
    """Pairwise wins of CHALLENGER over BASELINE (CSV files or lists of numbers, lower is better by default)."""
    record = pairwise_wins(read_values(challenger, column), read_values(baseline, column),
                           lower_is_better=not higher_is_better)
    write_result(ctx, "wins", {**WinRecordSchema().dump(record), "summary": str(record)})
    echo_config(ctx, "stats")
