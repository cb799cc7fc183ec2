"""
Fork experiments: continue training from one base checkpoint under several LR
schedules and seeds, probe the quantization gap along the way, and compare the
conditions against the first one (the control).
"""
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from audit import (bind_run, clear_run, config_digest, export, ledger_points, probe_tensors, record_point,
                   schedule_of)
from db import commit_or_rollback
from errors import ConfigError, QuantAuditError, StatsError
from evalset import single_threaded
from models import DONE, FAILED, RUNNING
from quant import Int4GroupScheme, int4_scale_map
from schedules import (BUMP, COOL, CosineWarmup, OLISpec, SGDRSpec, calibrate_bump_amplitude, classify_step,
                       schedule_to_dict)
from schemas import ForkSummarySchema
from stats import pairwise_wins, welch_t
from toylab.model import forward_loss, model_from_checkpoint, model_to_tensors
from toylab.optim import AdamWConfig, build_optimizer
from toylab.train import batch_for_step, run_steps
from weightstore import CheckpointManifest, read_checkpoint, read_manifest, select_quantizable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForkCondition:
    name: str
    schedule: object


@dataclass
class ForkResult:
    summary: dict
    trajectories: dict = field(default_factory=dict)  # (condition, seed) -> [TrajectoryPoint]
    failures: dict = field(default_factory=dict)  # (condition, seed) -> message


def default_conditions(fork_step, steps, base=None, sgdr_period=10000, bump_multiplier=5.0, bump_len=75, cool_len=300):
    """Cosine continuation (control), SGDR restarts and OLI, all sharing the base cosine's LR range."""
    base = base or CosineWarmup()
    if fork_step + steps > base.total_steps:
        raise ConfigError(
            f"Fork ends at step {fork_step + steps}, past the base schedule's {base.total_steps} steps"
        )
    return [
        ForkCondition("cosine", base),
        ForkCondition("sgdr", SGDRSpec(eta_max=base.eta_max, eta_min=base.eta_min, period=sgdr_period,
                                       fork_step=fork_step)),
        ForkCondition("oli", OLISpec(base=base, bump_multiplier=bump_multiplier, bump_len=bump_len,
                                     cool_len=cool_len, fork_step=fork_step)),
    ]


def gradients_at(model, batch):
    model.zero_grad()
    loss, _ = forward_loss(model, batch)
    loss.backward()
    grads = {name: p.grad.detach().cpu().to(torch.float32).numpy().copy() for name, p in model.named_parameters()}
    model.zero_grad()
    return grads


def measure_bump_inputs(tensors, grads, selector=None, scheme=None):
    """(median INT4 group scale, median |gradient|) over the quantized tensors."""
    scheme = scheme or Int4GroupScheme()
    names = select_quantizable(CheckpointManifest.for_tensors(0, tensors), selector)
    if not names:
        raise ConfigError("No tensors selected for bump calibration")
    scales = np.concatenate([int4_scale_map(tensors[n], scheme).ravel() for n in names])
    scales = scales[np.isfinite(scales)]
    if scales.size == 0:
        raise ConfigError("Every selected group is degenerate; no scale to calibrate against")
    magnitudes = np.concatenate([np.abs(np.asarray(grads[n], dtype=np.float64)).ravel() for n in names if n in grads])
    return float(np.median(scales)), float(np.median(magnitudes))


def calibrate_conditions(conditions, manifest, tensors, tokens, K, seed, batch_size, selector=None):
    """Re-size every OLI bump from the fork checkpoint's measured scales and gradients."""
    model = model_from_checkpoint(manifest, tensors)
    batch = batch_for_step(tokens, seed, manifest.step, batch_size, model.cfg.seq_len)
    scale_median, grad_median = measure_bump_inputs(tensors, gradients_at(model, batch), selector)
    calibrated = []
    record = None
    for cond in conditions:
        if isinstance(cond.schedule, OLISpec):
            eta_max = cond.schedule.base.eta_max
            derived = K * scale_median / grad_median
            amplitude = calibrate_bump_amplitude(K, scale_median, grad_median, eta_max)
            cond = replace(cond, schedule=replace(cond.schedule, bump_multiplier=amplitude / eta_max))
            record = {"K": K, "scale_median": scale_median, "grad_median": grad_median,
                      "derived_lr": derived, "bump_lr": amplitude, "bump_multiplier": amplitude / eta_max}
            logger.info("Calibrated OLI bump: derived %.3g, applied %.3g", derived, amplitude)
        calibrated.append(cond)
    return calibrated, record


def run_id_for(cond, seed, fork_step, steps):
    return f"fork:{cond.name}:seed_{seed}:{fork_step}+{steps}"


def _set_status(session, run, status, message=None):
    if run is None:
        return
    run.status = status
    run.message = message
    commit_or_rollback(session)


def _run_one(cond, seed, manifest, tensors, steps, es, tokens, probe_every, selector, schemes,
             batch_size, adamw, session, run_id, threads, progress):
    fork_step = manifest.step
    end = fork_step + steps
    model = model_from_checkpoint(manifest, tensors)
    optimizer = build_optimizer(model, adamw)
    points = []

    def probe(step):
        snapshot = model_to_tensors(model)
        probed = CheckpointManifest.for_tensors(step, snapshot, manifest.meta)
        point = probe_tensors(probed, snapshot, es, selector, schemes, cond.schedule, threads=threads)
        points.append(point)
        if session is not None:
            record_point(session, run_id, point)

    def before_step(step):
        if (step - fork_step) % probe_every == 0:
            probe(step)

    run_steps(model, optimizer, tokens, cond.schedule, fork_step, end, seed, batch_size,
              before_step=before_step, progress=progress)
    if not points or points[-1].step != end:
        probe(end)
    return points


def fork(base_ckpt, conditions, steps, seeds, es, tokens, out_dir, probe_every=1000, selector=None, schemes=None,
         batch_size=4, adamw=None, session=None, threads=1, progress=False, calibrate_k=None):
    """Run every (condition, seed) pair from the same base weights and summarize.

    Each run starts with fresh optimizer state. Runs already completed in the
    ledger under the same configuration (schedule, seed, probe settings,
    evalset, training data) are read back instead of retrained; a failed run is
    recorded and the rest of the matrix still runs.
    """
    if not conditions:
        raise ConfigError("fork needs at least one condition")
    if not seeds:
        raise ConfigError("fork needs at least one seed")
    names = [c.name for c in conditions]
    if len(set(names)) != len(names):
        raise ConfigError(f"Condition names must be unique, got {names}")
    if steps < 0 or probe_every < 1:
        raise ConfigError("steps must be >= 0 and probe_every >= 1")
    adamw = adamw or AdamWConfig()

    manifest, tensors = read_checkpoint(base_ckpt)
    fork_step = manifest.step
    bump_record = None
    if calibrate_k is not None:
        conditions, bump_record = calibrate_conditions(conditions, manifest, tensors, tokens, calibrate_k,
                                                       seeds[0], batch_size, selector)

    shared = config_digest(
        base=os.path.abspath(base_ckpt), steps=steps, probe_every=probe_every, selector=selector, schemes=schemes,
        evalset=es, tokens=np.asarray(tokens), batch_size=batch_size, adamw=adamw, calibrate_k=calibrate_k,
    )
    result = ForkResult(summary={})
    with single_threaded():
        for cond in conditions:
            for seed in seeds:
                run_id = run_id_for(cond, seed, fork_step, steps)
                run = None
                if session is not None:
                    digest = config_digest(shared=shared, schedule=schedule_to_dict(cond.schedule), seed=seed)
                    run = bind_run(session, run_id, "fork", digest)
                if run is not None and run.status == DONE:
                    logger.info("Run %s already complete; reading it from the ledger", run_id)
                    points = ledger_points(session, run_id)
                else:
                    if run is not None:
                        clear_run(session, run_id)
                    _set_status(session, run, RUNNING)
                    try:
                        points = _run_one(cond, seed, manifest, tensors, steps, es, tokens, probe_every, selector,
                                          schemes, batch_size, adamw, session, run_id, threads, progress)
                    except (QuantAuditError, OSError) as e:
                        logger.warning("Run %s failed: %s", run_id, e)
                        _set_status(session, run, FAILED, str(e))
                        result.failures[(cond.name, seed)] = str(e)
                        continue
                    _set_status(session, run, DONE)
                export(points, "csv", os.path.join(out_dir, cond.name, f"seed_{seed}", "trajectory.csv"))
                result.trajectories[(cond.name, seed)] = points

    result.summary = summarize_fork(base_ckpt, fork_step, steps, conditions, seeds, result.trajectories,
                                    result.failures, bump_record)
    return result


def _mean_std(values):
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


def _welch_or_none(a, b):
    try:
        return welch_t(a, b)
    except StatsError:
        return None


def _gaps_by_step(points, fork_step, keep=None):
    """{step: INT4 gap} of the probes after the fork step (the fork-step probe is the shared base)."""
    return {p.step: p.gap_int4_pct for p in points
            if p.step > fork_step and p.gap_int4_pct is not None and (keep is None or keep(p.step))}


def _phase_comparison(cond, seeds, control_seeds, trajectories, control_name, fork_step, tag):
    """Probes of an OLI condition tagged `tag`, against the control's probes at the same steps."""
    challenger = {}
    for seed in seeds:
        gaps = _gaps_by_step(trajectories[(cond.name, seed)], fork_step,
                             keep=lambda step: classify_step(cond.schedule, step) == tag)
        for step, value in gaps.items():
            challenger.setdefault(step, []).append(value)
    control = {}
    for seed in control_seeds:
        for step, value in _gaps_by_step(trajectories[(control_name, seed)], fork_step).items():
            control.setdefault(step, []).append(value)

    matching = sorted(set(challenger) & set(control))
    ours = [g for s in matching for g in challenger[s]]
    theirs = [g for s in matching for g in control[s]]
    mean, std = _mean_std(ours)
    wins = ties = total = 0
    for step in matching:
        record = pairwise_wins(challenger[step], control[step])
        wins, ties, total = wins + record.wins, ties + record.ties, total + record.total
    return {
        "n_probes": len(ours),
        "mean_gap": mean,
        "std_gap": std,
        "wins_vs_baseline": {"wins": wins, "ties": ties, "total": total} if total else None,
        "welch_vs_baseline": _welch_or_none(ours, theirs),
    }


def summarize_fork(base_ckpt, fork_step, steps, conditions, seeds, trajectories, failures, bump_record=None):
    """Final-gap statistics of every condition and its comparison with the first (control) condition."""
    control = conditions[0].name
    final_step = fork_step + steps

    def completed(name):
        return [s for s in seeds if (name, s) in trajectories]

    def final_gaps(name):
        return [trajectories[(name, s)][-1].gap_int4_pct for s in completed(name)
                if trajectories[(name, s)] and trajectories[(name, s)][-1].gap_int4_pct is not None]

    control_gaps = final_gaps(control)
    rows = []
    for cond in conditions:
        gaps = final_gaps(cond.name)
        mean, std = _mean_std(gaps)
        ppls = [trajectories[(cond.name, s)][-1].ppl_fp32 for s in completed(cond.name)]
        row = {
            "name": cond.name,
            "kind": cond.schedule.kind,
            "seeds": completed(cond.name),
            "failed_seeds": [s for s in seeds if (cond.name, s) in failures],
            "final_step": final_step,
            "final_gaps": gaps,
            "mean_gap": mean,
            "std_gap": std,
            "mean_ppl_fp32": float(np.mean(ppls)) if ppls else None,
            "wins_vs_baseline": None,
            "welch_vs_baseline": None,
            "cool_phase": None,
            "bump_phase": None,
        }
        if cond.name != control and gaps and control_gaps:
            row["wins_vs_baseline"] = pairwise_wins(gaps, control_gaps)
            row["welch_vs_baseline"] = _welch_or_none(gaps, control_gaps)
        if isinstance(cond.schedule, OLISpec) and cond.name != control:
            row["cool_phase"] = _phase_comparison(cond, completed(cond.name), completed(control), trajectories,
                                                  control, fork_step, COOL)
            row["bump_phase"] = _phase_comparison(cond, completed(cond.name), completed(control), trajectories,
                                                  control, fork_step, BUMP)
        rows.append(row)

    summary = {
        "base_checkpoint": str(base_ckpt),
        "fork_step": fork_step,
        "steps": steps,
        "baseline": control,
        "bump_amplitude": bump_record,
        "conditions": rows,
    }
    return ForkSummarySchema().dump(summary)


def load_schedule_base(base_ckpt):
    """The cosine schedule recorded in a checkpoint, or the default one."""
    schedule = schedule_of(read_manifest(base_ckpt))
    if isinstance(schedule, CosineWarmup):
        return schedule
    if isinstance(schedule, OLISpec):
        return schedule.base
    return CosineWarmup()
