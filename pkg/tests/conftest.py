import numpy as np
import pytest

from audit import TrajectoryPoint
from db import make_session
from evalset import build_evalset
from quant import gap
from schedules import CosineWarmup, lr_at
from toylab.model import TinyLMConfig
from toylab.train import CorpusConfig, RunConfig, load_corpus, train

# (step, FP32 PPL, INT4 gap %, INT8 gap %) of the published Pythia-160m audit
PUBLISHED = [
    (1000, 110.1, 1.7, 0.02),
    (7000, 42.8, 5.9, 0.06),
    (10000, 40.1, 6.8, 0.04),
    (30000, 35.7, 9.1, 0.04),
    (70000, 33.7, 11.4, 0.11),
    (77000, 33.4, 12.7, 0.11),
    (83000, 34.4, 19.1, 0.11),
    (100000, 34.0, 47.0, 0.20),
    (120000, 34.9, 158.4, 0.56),
    (143000, 35.3, 517.1, 0.79),
]
PUBLISHED_LR_PCT = [69.9, 99.9, 99.2, 91.3, 57.2, 50.2, 44.3, 29.0, 15.7, 10.0]
PUBLISHED_PHASES = [1, 1, 2, 2, 2, 2, 3, 3, 3, 3]


def published_points():
    schedule = CosineWarmup()
    points = []
    for step, ppl, g4, g8 in PUBLISHED:
        ppl_int4 = ppl * (1 + g4 / 100)
        ppl_int8 = ppl * (1 + g8 / 100)
        lr = lr_at(schedule, step)
        points.append(TrajectoryPoint(
            step=step, ppl_fp32=ppl,
            ppl_int4=ppl_int4, gap_int4_pct=gap(ppl, ppl_int4),
            ppl_int8=ppl_int8, gap_int8_pct=gap(ppl, ppl_int8),
            lr=lr, lr_frac=lr / schedule.eta_max,
        ))
    return points


@pytest.fixture
def published():
    return published_points()


@pytest.fixture
def session():
    return make_session("sqlite://")


@pytest.fixture(scope="session")
def tiny_cfg():
    return TinyLMConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=16, seq_len=16)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg):
    return RunConfig(
        seed=0, total_steps=40, checkpoint_every=20, batch_size=4,
        corpus=CorpusConfig(seed=7, length=20000, val_fraction=0.1), model=tiny_cfg,
    )


@pytest.fixture(scope="session")
def tiny_evalset(tiny_run):
    _, validation = load_corpus(tiny_run.corpus, tiny_run.model.vocab_size)
    return build_evalset(validation, n_batches=4, rows=2, seq_len=16, seed=0,
                         vocab_size=tiny_run.model.vocab_size, corpus_id="tiny")


@pytest.fixture(scope="session")
def trained_root(tiny_run, tmp_path_factory):
    """Checkpoints at steps 0, 20 and 40 of the tiny run."""
    root = tmp_path_factory.mktemp("checkpoints")
    train(tiny_run, out_dir=str(root))
    return str(root)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
