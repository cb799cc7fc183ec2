import click

from evalset import build_evalset, save_evalset
from resources.common import Blueprint, echo_config, handle_errors, output_path, require_path
from toylab.train import RunConfig, load_corpus, load_run_config, train

blp = Blueprint("lab", description="Toy training runs and their evaluation set.")


def run_config_option(f):
    return click.option("--config", "config_file", default=None,
                        help="Run config JSON [default: the built-in toy run].")(f)


def load_run(config_file):
    if config_file is None:
        return RunConfig()
    return load_run_config(require_path(config_file, "Run config"))


@blp.command("train")
@run_config_option
@click.option("--checkpoints", default=None, help="Checkpoint directory [default: <output>/checkpoints].")
@click.pass_context
@handle_errors
def train_command(ctx, config_file, checkpoints):
    """Train the toy model, writing a checkpoint at step 0 and every interval."""
    run = load_run(config_file)
    out_dir = checkpoints or output_path(ctx, "checkpoints", "")
    history = []
    paths = train(run, out_dir=out_dir, progress=True, history=history)
    echo_config(ctx, "train")
    if history:
        click.echo(f"loss {history[0][2]:.4f} -> {history[-1][2]:.4f} over {len(history)} steps")
    click.echo(f"{len(paths)} checkpoints -> {out_dir}")


@blp.command("evalset")
@run_config_option
@click.option("--n-batches", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--rows", default=4, show_default=True, type=click.IntRange(min=1))
@click.option("--seq-len", default=None, type=click.IntRange(min=2), help="[default: the model's seq_len]")
@click.option("--path", "evalset_path", default=None, help="Evalset file [default: <output>/evalset.bin].")
@click.pass_context
@handle_errors
def evalset_command(ctx, config_file, n_batches, rows, seq_len, evalset_path):
    """Build the fixed evaluation set from the validation tail of the toy corpus."""
    run = load_run(config_file)
    _, validation = load_corpus(run.corpus, run.model.vocab_size)
    es = build_evalset(
        validation, n_batches=n_batches, rows=rows, seq_len=seq_len or run.model.seq_len,
        seed=ctx.obj["SEED"], vocab_size=run.model.vocab_size, corpus_id=f"markov:{run.corpus.seed}",
    )
    path = save_evalset(es, evalset_path or output_path(ctx, "evalset.bin"))
    echo_config(ctx, "evalset")
    click.echo(f"{es.n_batches}x{es.rows}x{es.seq_len} tokens -> {path}")
