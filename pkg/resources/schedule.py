import csv
import json

import click

from resources.audit import load_schedule_file
from resources.common import Blueprint, echo_config, handle_errors, output_path
from schedules import CosineWarmup, OLISpec, SGDRSpec, classify_step, emit_curve

blp = Blueprint("schedule", description="Learning-rate curves.")

CURVE_COLUMNS = ("step", "lr", "lr_frac_of_eta_max", "phase_tag")


def build_schedule(kind, eta_max, eta_min, warmup, total, period, fork_step, bump_multiplier, bump_len, cool_len):
    base = CosineWarmup(eta_max=eta_max, eta_min=eta_min, warmup_steps=warmup, total_steps=total)
    if kind == "cosine":
        return base
    if kind == "sgdr":
        return SGDRSpec(eta_max=eta_max, eta_min=eta_min, period=period, fork_step=fork_step)
    return OLISpec(base=base, bump_multiplier=bump_multiplier, bump_len=bump_len, cool_len=cool_len,
                   fork_step=fork_step)


def curve_rows(spec, start, end, stride):
    rows = []
    for step, lr in emit_curve(spec, start, end, stride):
        rows.append({
            "step": step,
            "lr": lr,
            "lr_frac_of_eta_max": lr / spec.peak,
            "phase_tag": classify_step(spec, step) if isinstance(spec, OLISpec) else None,
        })
    return rows


@blp.command("schedule")
@click.option("--spec", "spec_file", default=None, help="Schedule JSON; overrides the shape options below.")
@click.option("--kind", default="cosine", show_default=True, type=click.Choice(["cosine", "sgdr", "oli"]))
@click.option("--eta-max", default=6e-4, show_default=True, type=float)
@click.option("--eta-min", default=6e-5, show_default=True, type=float)
@click.option("--warmup", default=1430, show_default=True, type=click.IntRange(min=0))
@click.option("--total", default=143000, show_default=True, type=click.IntRange(min=1))
@click.option("--period", default=10000, show_default=True, type=click.IntRange(min=1), help="SGDR restart period.")
@click.option("--fork-step", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--bump-multiplier", default=5.0, show_default=True, type=float)
@click.option("--bump-len", default=75, show_default=True, type=click.IntRange(min=0))
@click.option("--cool-len", default=300, show_default=True, type=click.IntRange(min=0))
@click.option("--start", default=None, type=click.IntRange(min=0), help="First step [default: the fork step].")
@click.option("--end", default=None, type=click.IntRange(min=0), help="End step, exclusive [default: total + 1].")
@click.option("--stride", default=1000, show_default=True, type=click.IntRange(min=1))
@click.pass_context
@handle_errors
def schedule(ctx, spec_file, kind, eta_max, eta_min, warmup, total, period, fork_step, bump_multiplier, bump_len,
             cool_len, start, end, stride):
    """Sample a learning-rate schedule every STRIDE steps."""
    if spec_file is not None:
        spec = load_schedule_file(spec_file)
    else:
        spec = build_schedule(kind, eta_max, eta_min, warmup, total, period, fork_step, bump_multiplier,
                              bump_len, cool_len)
    spec_start = getattr(spec, "fork_step", 0)
    spec_total = spec.base.total_steps if isinstance(spec, OLISpec) else getattr(spec, "total_steps", total)
    start = spec_start if start is None else start
    end = spec_total + 1 if end is None else end
    rows = curve_rows(spec, start, end, stride)

    fmt = ctx.obj["FORMAT"]
    path = output_path(ctx, f"schedule.{fmt}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fmt == "json":
            json.dump(rows, f, indent=2)
            f.write("\n")
        else:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CURVE_COLUMNS)
            for row in rows:
                writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in CURVE_COLUMNS])
    echo_config(ctx, "schedule")
    click.echo(f"{len(rows)} samples -> {path}")
