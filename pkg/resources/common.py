import functools
import json
import os

import click
from marshmallow import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from db import make_session
from errors import QuantAuditError
from evalset import load_evalset
from quant import PER_BLOCK, PER_ROW_GROUP, parse_scheme
from schemas import CommandConfigSchema
from weightstore import QuantSelector


class Blueprint:
    """A named set of commands, registered on the CLI group by the app factory."""

    def __init__(self, name, description=None):
        self.name = name
        self.description = description
        self.commands = []

    def command(self, *args, **kwargs):
        def decorator(f):
            cmd = click.command(*args, **kwargs)(f)
            self.commands.append(cmd)
            return cmd
        return decorator

    def group(self, *args, **kwargs):
        def decorator(f):
            grp = click.group(*args, **kwargs)(f)
            self.commands.append(grp)
            return grp
        return decorator


def abort(message):
    raise click.ClickException(message)


def handle_errors(f):
    """Turn toolkit, validation, database and I/O errors into exit code 1 with the message."""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ValidationError as e:
            abort(f"Invalid input: {e.messages}")
        except (QuantAuditError, OSError, SQLAlchemyError) as e:
            abort(str(e))
    return wrapper


def require_path(path, what="Path"):
    if not os.path.exists(path):
        abort(f"{what} not found: {path}")
    return path


def output_path(ctx, *parts):
    path = os.path.join(ctx.obj["OUTPUT"], *parts)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def echo_config(ctx, subcommand):
    """Write the resolved command configuration next to the outputs, so the run can be repeated."""
    params = {k: list(v) if isinstance(v, tuple) else v for k, v in ctx.params.items()}
    config = CommandConfigSchema().dump({
        "subcommand": subcommand,
        "seed": ctx.obj["SEED"],
        "threads": ctx.obj["THREADS"],
        "output": ctx.obj["OUTPUT"],
        "format": ctx.obj["FORMAT"],
        "params": params,
    })
    path = output_path(ctx, f"{subcommand}.config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True, default=str)
    return path


def open_ledger(ctx):
    os.makedirs(ctx.obj["OUTPUT"], exist_ok=True)
    return make_session(ctx.obj["DB_URL"])


def load_evalset_arg(path):
    return load_evalset(require_path(path, "Evalset"))


def selector_from_options(include, exclude):
    defaults = QuantSelector()
    return QuantSelector(
        include_patterns=tuple(include) or defaults.include_patterns,
        exclude_patterns=tuple(exclude) or defaults.exclude_patterns,
    )


def schemes_from_options(names, group_size, scale_scope):
    return [parse_scheme(name, group_size, scale_scope) for name in names]


def _apply(f, options):
    for option in reversed(options):
        f = option(f)
    return f


def selector_options(f):
    """--include/--exclude globs choosing which tensors are quantized."""
    return _apply(f, [
        click.option("--include", multiple=True, help="Glob of tensor names to quantize; repeatable."),
        click.option("--exclude", multiple=True, help="Glob of tensor names to keep in full precision; repeatable."),
    ])


def quant_options(default_schemes):
    """Options shared by every command that quantizes a checkpoint."""
    def decorator(f):
        return _apply(selector_options(f), [
            click.option("--scheme", "schemes", multiple=True, default=default_schemes,
                         type=click.Choice(["int4", "int8"]), show_default=True, help="Probe scheme; repeatable."),
            click.option("--group-size", default=128, show_default=True, type=click.IntRange(min=1)),
            click.option("--scale-scope", default=PER_BLOCK, show_default=True,
                         type=click.Choice([PER_BLOCK, PER_ROW_GROUP])),
        ])
    return decorator


def parse_int_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def parse_name_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    return [v.strip() for v in value.split(",") if v.strip()]
