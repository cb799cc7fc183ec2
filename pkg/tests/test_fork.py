import os

import numpy as np
import pytest

from audit import probe_tensors
from errors import ConfigError
from evalset import single_threaded
from models import RunModel
from quant import Int4GroupScheme, int4_scale_map
from schedules import BUMP, COOL, CosineWarmup, OLISpec, SGDRSpec, classify_step
from toylab.fork import (ForkCondition, calibrate_conditions, default_conditions, fork, load_schedule_base,
                         measure_bump_inputs, run_id_for)
from toylab.train import load_corpus
from weightstore import CheckpointManifest, checkpoint_dirname, read_checkpoint, write_checkpoint

INT4 = [Int4GroupScheme()]


@pytest.fixture(scope="module")
def base_ckpt(trained_root):
    return os.path.join(trained_root, checkpoint_dirname(20))


@pytest.fixture(scope="module")
def train_tokens(tiny_run):
    tokens, _ = load_corpus(tiny_run.corpus, tiny_run.model.vocab_size)
    return tokens


@pytest.fixture
def conditions(base_ckpt):
    return default_conditions(20, 10, base=load_schedule_base(base_ckpt), sgdr_period=5, bump_len=2, cool_len=3)


def test_default_conditions(base_ckpt):
    base = load_schedule_base(base_ckpt)
    assert base.total_steps == 40
    names = [c.name for c in default_conditions(20, 10, base=base)]
    assert names == ["cosine", "sgdr", "oli"]
    with pytest.raises(ConfigError):
        default_conditions(20, 30, base=base)


def test_schedule_base_defaults_without_metadata(tmp_path):
    tensors = {"w": np.zeros((2, 2), np.float32)}
    path = write_checkpoint(CheckpointManifest.for_tensors(0, tensors), tensors, str(tmp_path / "plain"))
    assert load_schedule_base(path) == CosineWarmup()


def test_zero_step_fork_is_a_probe_of_the_base(base_ckpt, tiny_evalset, train_tokens, tmp_path):
    base = load_schedule_base(base_ckpt)
    result = fork(base_ckpt, [ForkCondition("cosine", base)], steps=0, seeds=[0], es=tiny_evalset,
                  tokens=train_tokens, out_dir=str(tmp_path), schemes=INT4)
    (point,) = result.trajectories[("cosine", 0)]

    manifest, tensors = read_checkpoint(base_ckpt)
    with single_threaded():
        expected = probe_tensors(manifest, tensors, tiny_evalset, schemes=INT4, schedule=base)
    assert point == expected


def test_fork_matrix(base_ckpt, tiny_evalset, train_tokens, tmp_path, conditions, session):
    result = fork(base_ckpt, conditions, steps=10, seeds=[0, 1], es=tiny_evalset, tokens=train_tokens,
                  out_dir=str(tmp_path), probe_every=2, schemes=INT4, session=session)
    assert result.failures == {}
    assert sorted(result.trajectories) == [(c, s) for c in ("cosine", "oli", "sgdr") for s in (0, 1)]
    for (name, seed), points in result.trajectories.items():
        assert [p.step for p in points] == [20, 22, 24, 26, 28, 30]
        assert os.path.isfile(tmp_path / name / f"seed_{seed}" / "trajectory.csv")

    # every run starts from the same weights
    first_probes = {points[0].ppl_fp32 for points in result.trajectories.values()}
    assert len(first_probes) == 1

    summary = result.summary
    assert summary["baseline"] == "cosine"
    assert summary["fork_step"] == 20
    rows = {row["name"]: row for row in summary["conditions"]}
    assert rows["cosine"]["wins_vs_baseline"] is None
    assert rows["sgdr"]["wins_vs_baseline"]["total"] == 4
    assert rows["oli"]["kind"] == "oli"
    assert len(rows["oli"]["final_gaps"]) == 2

    oli = conditions[2].schedule
    cool_steps = [s for s in (22, 24, 26, 28, 30) if classify_step(oli, s) == COOL]
    bump_steps = [s for s in (22, 24, 26, 28, 30) if classify_step(oli, s) == BUMP]
    assert rows["oli"]["cool_phase"]["n_probes"] == 2 * len(cool_steps)
    assert rows["oli"]["bump_phase"]["n_probes"] == 2 * len(bump_steps)
    assert rows["oli"]["cool_phase"]["wins_vs_baseline"]["total"] == 4 * len(cool_steps)


def test_completed_runs_are_read_back(base_ckpt, tiny_evalset, train_tokens, tmp_path, conditions, session):
    kwargs = dict(steps=4, seeds=[0], es=tiny_evalset, tokens=train_tokens, out_dir=str(tmp_path),
                  probe_every=2, schemes=INT4, session=session)
    first = fork(base_ckpt, conditions[:2], **kwargs)
    run = session.get(RunModel, run_id_for(conditions[0], 0, 20, 4))
    assert run.status == "done"
    again = fork(base_ckpt, conditions[:2], **kwargs)
    assert again.trajectories == first.trajectories
    assert again.summary == first.summary


def test_changed_parameters_are_not_read_back(base_ckpt, tiny_evalset, train_tokens, tmp_path, session):
    base = load_schedule_base(base_ckpt)
    kwargs = dict(steps=4, seeds=[0], es=tiny_evalset, tokens=train_tokens, out_dir=str(tmp_path),
                  probe_every=2, schemes=INT4, session=session)
    mild = default_conditions(20, 4, base=base, bump_multiplier=5.0, bump_len=2, cool_len=3)[2:]
    steep = default_conditions(20, 4, base=base, bump_multiplier=20.0, bump_len=2, cool_len=3)[2:]
    first = fork(base_ckpt, mild, **kwargs)
    second = fork(base_ckpt, steep, **kwargs)
    assert run_id_for(mild[0], 0, 20, 4) == run_id_for(steep[0], 0, 20, 4)
    before, after = first.trajectories[("oli", 0)], second.trajectories[("oli", 0)]
    assert before[0].ppl_fp32 == after[0].ppl_fp32
    assert before[0].lr * 4 == pytest.approx(after[0].lr)
    assert before[-1].ppl_fp32 != after[-1].ppl_fp32
    assert second.summary["conditions"][0]["final_gaps"] != first.summary["conditions"][0]["final_gaps"]
    assert session.get(RunModel, run_id_for(steep[0], 0, 20, 4)).status == "done"

    denser = fork(base_ckpt, mild, **{**kwargs, "probe_every": 1})
    assert [p.step for p in denser.trajectories[("oli", 0)]] == [20, 21, 22, 23, 24]


def test_failed_run_does_not_stop_the_matrix(base_ckpt, tiny_evalset, train_tokens, tmp_path, conditions, session):
    broken = ForkCondition("late-sgdr", SGDRSpec(period=5, fork_step=25))
    result = fork(base_ckpt, [conditions[0], broken], steps=4, seeds=[0], es=tiny_evalset, tokens=train_tokens,
                  out_dir=str(tmp_path), probe_every=2, schemes=INT4, session=session)
    assert ("cosine", 0) in result.trajectories
    assert ("late-sgdr", 0) in result.failures
    assert session.get(RunModel, run_id_for(broken, 0, 20, 4)).status == "failed"
    rows = {row["name"]: row for row in result.summary["conditions"]}
    assert rows["late-sgdr"]["failed_seeds"] == [0]


def test_fork_argument_checks(base_ckpt, tiny_evalset, train_tokens, tmp_path, conditions):
    with pytest.raises(ConfigError):
        fork(base_ckpt, [], 4, [0], tiny_evalset, train_tokens, str(tmp_path))
    with pytest.raises(ConfigError):
        fork(base_ckpt, conditions, 4, [], tiny_evalset, train_tokens, str(tmp_path))
    with pytest.raises(ConfigError):
        fork(base_ckpt, [conditions[0], conditions[0]], 4, [0], tiny_evalset, train_tokens, str(tmp_path))


def test_measure_bump_inputs(rng):
    w = rng.standard_normal((8, 32)).astype(np.float32)
    tensors = {"blocks.0.mlp.fc.weight": w, "blocks.0.mlp.fc.bias": np.zeros(8, np.float32)}
    grads = {"blocks.0.mlp.fc.weight": np.full((8, 32), -0.25), "blocks.0.mlp.fc.bias": np.ones(8)}
    scale, grad = measure_bump_inputs(tensors, grads)
    assert scale == pytest.approx(float(np.median(int4_scale_map(w, Int4GroupScheme()))))
    assert grad == 0.25
    with pytest.raises(ConfigError):
        measure_bump_inputs({"tok_embed.weight": w}, grads)


def test_calibration_resizes_only_the_oli_bump(base_ckpt, train_tokens, conditions):
    manifest, tensors = read_checkpoint(base_ckpt)
    calibrated, record = calibrate_conditions(conditions, manifest, tensors, train_tokens, K=1.0, seed=0,
                                              batch_size=4)
    assert calibrated[:2] == conditions[:2]
    oli = calibrated[2].schedule
    assert isinstance(oli, OLISpec)
    assert oli.bump_lr == pytest.approx(record["bump_lr"])
    assert record["bump_lr"] == pytest.approx(min(record["derived_lr"], 5 * oli.base.eta_max))
    assert record["scale_median"] > 0 and record["grad_median"] > 0
