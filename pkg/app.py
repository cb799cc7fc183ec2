import logging
import os

import click
from dotenv import load_dotenv

from resources.audit import blp as AuditBlueprint
from resources.fork import blp as ForkBlueprint
from resources.lab import blp as LabBlueprint
from resources.probe import blp as ProbeBlueprint
from resources.report import blp as ReportBlueprint
from resources.schedule import blp as ScheduleBlueprint
from resources.stats import blp as StatsBlueprint


def register_blueprint(cli, blp):
    for command in blp.commands:
        cli.add_command(command)


def create_app(db_url=None):
    load_dotenv()

    @click.group(help="Quantization-robustness forensics over training checkpoints.")
    @click.option("--seed", default=0, show_default=True, type=int, help="Seed for any randomized step.")
    @click.option("--threads", default=None, type=click.IntRange(min=1),
                  help="Worker threads for sweeps [default: all cores]. QUANTAUDIT_THREADS overrides.")
    @click.option("--output", default="quantaudit-out", show_default=True,
                  type=click.Path(file_okay=False), help="Directory for every output file.")
    @click.option("--format", "fmt", default="csv", show_default=True, type=click.Choice(["csv", "json"]))
    @click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
    @click.pass_context
    def cli(ctx, seed, threads, output, fmt, verbose):
        env_threads = os.getenv("QUANTAUDIT_THREADS")
        if env_threads:
            try:
                threads = int(env_threads)
            except ValueError:
                raise click.BadParameter(f"QUANTAUDIT_THREADS must be an integer, got {env_threads!r}")

        ctx.ensure_object(dict)
        ctx.obj["SEED"] = seed
        ctx.obj["THREADS"] = max(1, threads or os.cpu_count() or 1)
        ctx.obj["OUTPUT"] = output
        ctx.obj["FORMAT"] = fmt
        # The ledger sits with the outputs unless pointed elsewhere
        ctx.obj["DB_URL"] = db_url or os.getenv("QUANTAUDIT_DB_URL", f"sqlite:///{os.path.join(output, 'ledger.db')}")
        ctx.obj["LOG_LEVEL"] = "DEBUG" if verbose else os.getenv("QUANTAUDIT_LOG_LEVEL", "INFO").upper()

        logging.basicConfig(
            level=ctx.obj["LOG_LEVEL"],
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )

    register_blueprint(cli, ProbeBlueprint)
    register_blueprint(cli, AuditBlueprint)
    register_blueprint(cli, ScheduleBlueprint)
    register_blueprint(cli, ForkBlueprint)
    register_blueprint(cli, StatsBlueprint)
    register_blueprint(cli, ReportBlueprint)
    register_blueprint(cli, LabBlueprint)

    return cli


if __name__ == "__main__":
    cli = create_app()
    cli()
