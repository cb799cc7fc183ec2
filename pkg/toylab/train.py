"""
Deterministic toy training runs: AdamW under an explicit LR schedule,
checkpoints written through weightstore at step 0 and every interval.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from tqdm import tqdm

from errors import CheckpointError, ConfigError, NonFiniteError
from evalset import single_threaded
from schedules import CosineWarmup, lr_at, schedule_from_dict, schedule_to_dict
from schemas import RunConfigSchema
from toylab.corpus import split_corpus, synth_corpus
from toylab.model import TinyLMConfig, forward_loss, init_model, model_from_tensors, model_to_tensors
from toylab.optim import AdamWConfig, build_optimizer
from weightstore import CheckpointManifest, checkpoint_dirname, read_manifest, write_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 1234
    length: int = 400000
    val_fraction: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    total_steps: int = 2000
    checkpoint_every: int = 200
    batch_size: int = 4
    schedule: object = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: TinyLMConfig = field(default_factory=TinyLMConfig)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.schedule is None:
            object.__setattr__(self, "schedule", default_toy_schedule(self.total_steps))

    @classmethod
    def from_dict(cls, data):
        loaded = RunConfigSchema().load(data or {})
        schedule = loaded["schedule"]
        return cls(
            seed=loaded["seed"],
            total_steps=loaded["total_steps"],
            checkpoint_every=loaded["checkpoint_every"],
            batch_size=loaded["batch_size"],
            schedule=None if schedule is None else schedule_from_dict(schedule),
            corpus=CorpusConfig(**loaded["corpus"]),
            model=TinyLMConfig(**loaded["model"]),
            optimizer=AdamWConfig(**loaded["optimizer"]),
        )

    def to_dict(self):
        return {
            "seed": self.seed,
            "total_steps": self.total_steps,
            "checkpoint_every": self.checkpoint_every,
            "batch_size": self.batch_size,
            "schedule": schedule_to_dict(self.schedule),
            "corpus": asdict(self.corpus),
            "model": asdict(self.model),
            "optimizer": asdict(self.optimizer),
        }


def default_toy_schedule(total_steps):
    total = max(int(total_steps), 1)
    warmup = min(max(1, total // 20), total - 1)
    return CosineWarmup(eta_max=3e-3, eta_min=3e-4, warmup_steps=warmup, total_steps=total)


def load_run_config(path):
    with open(path, encoding="utf-8") as f:
        return RunConfig.from_dict(json.load(f))


def load_corpus(corpus_cfg, vocab_size):
    """(train, validation) token arrays for a corpus configuration."""
    tokens = synth_corpus(corpus_cfg.seed, corpus_cfg.length, vocab_size)
    return split_corpus(tokens, corpus_cfg.val_fraction)


def batch_for_step(tokens, seed, step, batch_size, seq_len):
    """The training batch of `step`: depends only on (seed, step), never on history."""
    if tokens.size < seq_len:
        raise ConfigError(f"Training split of {tokens.size} tokens is shorter than seq_len {seq_len}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, tokens.size - seq_len + 1, size=batch_size)
    return np.stack([tokens[s:s + seq_len] for s in starts])


def run_steps(model, optimizer, tokens, schedule, start, end, seed, batch_size, before_step=None, history=None,
              progress=False):
    """Apply the updates of steps [start, end); the update of step t uses lr_at(schedule, t)."""
    model.train()
    for step in tqdm(range(start, end), disable=None if progress else True, desc="train", leave=False):
        if before_step is not None:
            before_step(step)
        lr = lr_at(schedule, step)
        optimizer.set_lr(lr)
        batch = batch_for_step(tokens, seed, step, batch_size, model.cfg.seq_len)
        loss, _ = forward_loss(model, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"Loss became non-finite at step {step}", index=step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if history is not None:
            history.append((step, lr, value))


def checkpoint_meta(run, schedule):
    meta = run.model.to_meta()
    meta.update({
        "seed": str(run.seed),
        "schedule": json.dumps(schedule_to_dict(schedule), sort_keys=True),
        "run_config": json.dumps(run.to_dict(), sort_keys=True),
    })
    return meta


def save_model(model, step, meta, root):
    tensors = model_to_tensors(model)
    manifest = CheckpointManifest.for_tensors(step, tensors, meta)
    return write_checkpoint(manifest, tensors, os.path.join(root, checkpoint_dirname(step)))


def checkpoint_steps(run):
    steps = list(range(0, run.total_steps, run.checkpoint_every))
    return steps + [run.total_steps]


def _already_trained(run, root):
    final = os.path.join(root, checkpoint_dirname(run.total_steps))
    if not os.path.isdir(final):
        return False
    try:
        meta = read_manifest(final).meta
    except (CheckpointError, OSError):
        return False
    return meta.get("run_config") == json.dumps(run.to_dict(), sort_keys=True)


def train(run, cfg=None, out_dir="checkpoints", progress=False, history=None):
    """Train from scratch and return the checkpoint directories in step order.

    A run whose final checkpoint already exists with the same configuration is
    not repeated.
    """
    if cfg is not None and cfg != run.model:
        run = replace(run, model=cfg)
    cfg = run.model
    paths = [os.path.join(out_dir, checkpoint_dirname(s)) for s in checkpoint_steps(run)]
    if _already_trained(run, out_dir):
        logger.info("Run already complete in %s; skipping training", out_dir)
        return paths

    train_tokens, _ = load_corpus(run.corpus, cfg.vocab_size)
    meta = checkpoint_meta(run, run.schedule)
    with single_threaded():
        model = model_from_tensors(cfg, init_model(cfg, run.seed))
        optimizer = build_optimizer(model, run.optimizer)

        def before_step(step):
            if step % run.checkpoint_every == 0:
                save_model(model, step, meta, out_dir)

        run_steps(model, optimizer, train_tokens, run.schedule, 0, run.total_steps, run.seed, run.batch_size,
                  before_step=before_step, history=history, progress=progress)
        save_model(model, run.total_steps, meta, out_dir)
    logger.info("Trained %d steps; %d checkpoints in %s", run.total_steps, len(paths), out_dir)
    return paths
