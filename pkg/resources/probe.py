import csv
import json

import click

from audit import probe_checkpoint
from quant import probe_gap
from resources.common import (Blueprint, echo_config, handle_errors, load_evalset_arg, output_path, quant_options,
                              require_path, schemes_from_options, selector_from_options)
from schemas import GapRecordSchema

blp = Blueprint("probe", description="Quantization gap of one checkpoint.")

GAP_COLUMNS = ("scheme", "ppl_fp", "ppl_q", "gap_pct")


@blp.command("probe")
@click.argument("checkpoint")
@click.argument("evalset")
@quant_options(("int4",))
@click.pass_context
@handle_errors
def probe(ctx, checkpoint, evalset, schemes, group_size, scale_scope, include, exclude):
    """Perplexity of CHECKPOINT on EVALSET in full precision and under each scheme."""
    require_path(checkpoint, "Checkpoint")
    es = load_evalset_arg(evalset)
    point = probe_checkpoint(
        checkpoint, es, selector_from_options(include, exclude),
        schemes_from_options(schemes, group_size, scale_scope), threads=ctx.obj["THREADS"],
    )

    records = []
    for name in schemes:
        record = probe_gap(point.ppl_fp32, getattr(point, f"ppl_{name}"))
        records.append(GapRecordSchema().dump({"scheme": name, **record.__dict__}))

    fmt = ctx.obj["FORMAT"]
    path = output_path(ctx, f"probe.{fmt}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fmt == "json":
            json.dump({"step": point.step, "records": records}, f, indent=2)
            f.write("\n")
        else:
            writer = csv.DictWriter(f, fieldnames=GAP_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(records)
    echo_config(ctx, "probe")

    for record in records:
        click.echo(json.dumps({"step": point.step, **record}))
