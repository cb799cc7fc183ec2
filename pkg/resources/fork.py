import json
import os

import click

from resources.common import (Blueprint, echo_config, handle_errors, load_evalset_arg, open_ledger, output_path,
                              parse_int_list, parse_name_list, quant_options, require_path, schemes_from_options,
                              selector_from_options)
from toylab.fork import default_conditions, fork, load_schedule_base
from toylab.model import TinyLMConfig
from toylab.train import RunConfig, load_corpus, load_run_config
from weightstore import read_manifest

blp = Blueprint("fork", description="Schedule interventions from a base checkpoint.")


@blp.command("fork")
@click.argument("base")
@click.argument("evalset")
@click.option("--steps", default=30000, show_default=True, type=click.IntRange(min=0), help="Steps to continue for.")
@click.option("--seeds", default="0,1,2", show_default=True, callback=parse_int_list, help="Comma-separated seeds.")
@click.option("--conditions", "condition_names", default="cosine,sgdr,oli", show_default=True,
              callback=parse_name_list, help="Subset of cosine,sgdr,oli; the first one is the control.")
@click.option("--probe-every", default=1000, show_default=True, type=click.IntRange(min=1))
@click.option("--sgdr-period", default=10000, show_default=True, type=click.IntRange(min=1))
@click.option("--bump-multiplier", default=5.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--bump-len", default=75, show_default=True, type=click.IntRange(min=0))
@click.option("--cool-len", default=300, show_default=True, type=click.IntRange(min=0))
@click.option("--calibrate-bump", "calibrate_k", default=None, type=float,
              help="Derive the OLI bump LR as K * median scale / median |grad|, capped at 5x eta_max.")
@click.option("--run-config", default=None,
              help="Run config JSON giving corpus, batch size and optimizer [default: the one recorded in BASE].")
@quant_options(("int4", "int8"))
@click.pass_context
@handle_errors
def fork_command(ctx, base, evalset, steps, seeds, condition_names, probe_every, sgdr_period, bump_multiplier,
                 bump_len, cool_len, calibrate_k, run_config, schemes, group_size, scale_scope, include, exclude):
    """Continue BASE under each condition and seed, probing on EVALSET, and compare against the control."""
    require_path(base, "Base checkpoint")
    es = load_evalset_arg(evalset)
    manifest = read_manifest(base)
    if run_config:
        run = load_run_config(require_path(run_config, "Run config"))
    elif "run_config" in manifest.meta:
        run = RunConfig.from_dict(json.loads(manifest.meta["run_config"]))
    else:
        run = RunConfig()
    cfg = TinyLMConfig.from_meta(manifest.meta)

    available = {c.name: c for c in default_conditions(
        manifest.step, steps, base=load_schedule_base(base), sgdr_period=sgdr_period,
        bump_multiplier=bump_multiplier, bump_len=bump_len, cool_len=cool_len,
    )}
    unknown = [n for n in condition_names if n not in available]
    if unknown or not condition_names:
        raise click.BadParameter(f"unknown conditions {unknown}; choose from {sorted(available)}",
                                 param_hint="--conditions")
    conditions = [available[n] for n in condition_names]

    train_tokens, _ = load_corpus(run.corpus, cfg.vocab_size)
    result = fork(
        base, conditions, steps, seeds, es, train_tokens, os.path.join(ctx.obj["OUTPUT"], "fork"),
        probe_every=probe_every,
        selector=selector_from_options(include, exclude),
        schemes=schemes_from_options(schemes, group_size, scale_scope),
        batch_size=run.batch_size,
        adamw=run.optimizer,
        session=open_ledger(ctx),
        threads=ctx.obj["THREADS"],
        progress=True,
        calibrate_k=calibrate_k,
    )
    path = output_path(ctx, "fork", "summary.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.summary, f, indent=2)
        f.write("\n")
    echo_config(ctx, "fork")

    click.echo(f"{len(result.trajectories)} runs -> {path}")
    for (name, seed), message in sorted(result.failures.items()):
        click.echo(f"run {name} seed {seed} failed: {message}", err=True)
    if result.failures:
        raise click.ClickException(f"{len(result.failures)} fork runs failed")
