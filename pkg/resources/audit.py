import json
import os

import click

from audit import (DEFAULT_P1_RATE, DEFAULT_REL_TOL, DEFAULT_WINDOW, export, load_trajectory, segment_phases,
                   sweep)
from resources.common import (Blueprint, echo_config, handle_errors, load_evalset_arg, open_ledger, output_path,
                              quant_options, require_path, schemes_from_options, selector_from_options)
from schedules import schedule_from_dict

blp = Blueprint("audit", description="Checkpoint sweeps and phase segmentation.")


def load_schedule_file(path):
    if path is None:
        return None
    with open(require_path(path, "Schedule file"), encoding="utf-8") as f:
        return schedule_from_dict(json.load(f))


@blp.command("audit")
@click.argument("root")
@click.argument("evalset")
@quant_options(("int4", "int8"))
@click.option("--kurtosis/--no-kurtosis", default=True, show_default=True, help="Also record pooled weight kurtosis.")
@click.option("--schedule", "schedule_file", default=None,
              help="Schedule JSON for the LR columns [default: the one recorded in each checkpoint].")
@click.option("--run-id", default=None, help="Ledger key of this sweep [default: derived from ROOT].")
@click.pass_context
@handle_errors
def audit(ctx, root, evalset, schemes, group_size, scale_scope, include, exclude, kurtosis, schedule_file, run_id):
    """Probe every checkpoint under ROOT and write the trajectory.

    Steps already probed in the ledger are not probed again.
    """
    require_path(root, "Checkpoint root")
    es = load_evalset_arg(evalset)
    session = open_ledger(ctx)
    result = sweep(
        root, es,
        selector=selector_from_options(include, exclude),
        schemes=schemes_from_options(schemes, group_size, scale_scope),
        schedule=load_schedule_file(schedule_file),
        with_kurtosis=kurtosis,
        threads=ctx.obj["THREADS"],
        session=session,
        run_id=run_id or f"audit:{os.path.abspath(root)}",
        progress=True,
    )
    fmt = ctx.obj["FORMAT"]
    path = export(result.points, fmt, output_path(ctx, f"trajectory.{fmt}"))
    echo_config(ctx, "audit")

    click.echo(f"{len(result.points)} rows ({result.probed} newly probed) -> {path}")
    for failure in result.failures:
        click.echo(f"failed step {failure.step} ({failure.path}): {failure.message}", err=True)


@blp.command("phases")
@click.argument("trajectory")
@click.option("--p1-rate", default=DEFAULT_P1_RATE, show_default=True, type=click.FloatRange(min=0),
              help="Relative FP32 perplexity improvement per 1,000 steps that ends rapid learning.")
@click.option("--window", default=DEFAULT_WINDOW, show_default=True, type=click.IntRange(min=1))
@click.option("--rel-tol", default=DEFAULT_REL_TOL, show_default=True, type=click.FloatRange(min=0))
@click.pass_context
@handle_errors
def phases(ctx, trajectory, p1_rate, window, rel_tol):
    """Detect the perplexity minimum and label every row of TRAJECTORY with its phase."""
    points = load_trajectory(require_path(trajectory, "Trajectory"))
    report = segment_phases(points, p1_rate=p1_rate, window=window, rel_tol=rel_tol)
    fmt = ctx.obj["FORMAT"]
    export(points, fmt, output_path(ctx, f"trajectory_phases.{fmt}"))
    export(report, fmt, output_path(ctx, f"phases.{fmt}"))
    echo_config(ctx, "phases")

    click.echo(
        f"boundary_12={report.boundary_12} boundary_23={report.boundary_23} "
        f"min_ppl={report.min_ppl_value!r}@{report.min_ppl_step} stall={report.stall_step}"
    )
    if report.partial:
        click.echo(f"partial segmentation: {report.reason}", err=True)
