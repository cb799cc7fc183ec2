"""
audit.py

The checkpoint sweep: every checkpoint under a root is probed in step order
(FP32 perplexity, quantized perplexities, gaps, LR position, optionally weight
kurtosis), the resulting trajectory is checked for the point where FP32
perplexity stops improving, and its rows are split into three phases.

Probed rows live in the ledger (models.ProbeModel), keyed by (run_id, step),
so a sweep interrupted halfway resumes where it stopped.
"""
import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np
from marshmallow import ValidationError
from tqdm import tqdm

from db import commit_or_rollback
from errors import CheckpointError, ConfigError, QuantAuditError, ScheduleDomainError, StatsError, TrajectoryError
from evalset import perplexity, single_threaded
from models import DONE, RUNNING, FailureModel, ProbeModel, RunModel
from quant import Int4GroupScheme, Int8ChannelScheme, gap, quantize_model
from schedules import lr_at, schedule_from_dict, schedule_to_dict
from schemas import PhaseReportSchema, TrajectoryPointSchema
from stats import pearson, pooled_weight_kurtosis
from toylab.model import model_from_checkpoint
from weightstore import list_checkpoints, read_checkpoint

logger = logging.getLogger(__name__)

COLUMNS = ("step", "ppl_fp32", "ppl_int4", "gap_int4_pct", "ppl_int8", "gap_int8_pct",
           "lr", "lr_frac", "kurtosis", "phase", "status")
NUMERIC_COLUMNS = COLUMNS[:-1]
REPORT_COLUMNS = ("phase", "n_rows", "first_step", "last_step", "ppl_start", "ppl_end", "gap_mean", "gap_max",
                  "boundary_12", "boundary_23", "min_ppl_step", "min_ppl_value", "stall_step", "partial", "reason")

DEFAULT_WINDOW = 5
DEFAULT_REL_TOL = 1e-3
DEFAULT_P1_RATE = 0.05
GAP_REL_TOL = 1e-9

OK = "ok"
FAILED = "failed"


@dataclass
class TrajectoryPoint:
    step: int
    ppl_fp32: float
    ppl_int4: float = None
    gap_int4_pct: float = None
    ppl_int8: float = None
    gap_int8_pct: float = None
    lr: float = None
    lr_frac: float = None
    kurtosis: float = None
    phase: int = None
    status: str = OK

    @classmethod
    def from_dict(cls, data):
        return cls(**TrajectoryPointSchema().load(data))

    def to_dict(self):
        return {name: getattr(self, name) for name in COLUMNS}


@dataclass(frozen=True)
class PhaseSummary:
    phase: int
    n_rows: int
    first_step: int = None
    last_step: int = None
    ppl_start: float = None
    ppl_end: float = None
    gap_mean: float = None
    gap_max: float = None


@dataclass
class PhaseReport:
    boundary_12: int
    boundary_23: int
    min_ppl_step: int
    min_ppl_value: float
    stall_step: int = None
    partial: bool = False
    reason: str = None
    phases: list = field(default_factory=list)

    def to_dict(self):
        return PhaseReportSchema().dump(self)


@dataclass
class SweepFailure:
    step: int
    path: str
    message: str


@dataclass
class SweepResult:
    points: list
    failures: list = field(default_factory=list)
    probed: int = 0


def verify_point(point, rel_tol=GAP_REL_TOL):
    """Raise TrajectoryError unless every gap column agrees with its perplexity columns."""
    if point.status == FAILED:
        return
    for ppl_col, gap_col in (("ppl_int4", "gap_int4_pct"), ("ppl_int8", "gap_int8_pct")):
        ppl_q, stored = getattr(point, ppl_col), getattr(point, gap_col)
        if ppl_q is None and stored is None:
            continue
        if ppl_q is None or stored is None:
            raise TrajectoryError(f"Step {point.step}: {ppl_col} and {gap_col} must be present together")
        expected = gap(point.ppl_fp32, ppl_q)
        if abs(expected - stored) > rel_tol * max(abs(expected), abs(stored), 1e-12):
            raise TrajectoryError(f"Step {point.step}: {gap_col}={stored!r} but the perplexities give {expected!r}")


def _check_ordered(points):
    steps = [p.step for p in points]
    for a, b in zip(steps, steps[1:]):
        if b <= a:
            raise TrajectoryError(f"Trajectory steps must be strictly increasing; {b} follows {a}")


def probed_rows(points):
    """The rows that hold measurements; failed checkpoints only mark their step."""
    return [p for p in points if p.status != FAILED]


# Probing

def _scheme_columns(scheme):
    if isinstance(scheme, Int8ChannelScheme):
        return "ppl_int8", "gap_int8_pct"
    if isinstance(scheme, Int4GroupScheme) and scheme.q_max == 15:
        return "ppl_int4", "gap_int4_pct"
    raise ConfigError(f"Scheme {scheme.name!r} has no trajectory column")


def schedule_of(manifest):
    """The LR schedule a checkpoint records about itself, if any."""
    raw = manifest.meta.get("schedule")
    return schedule_from_dict(json.loads(raw)) if raw else None


def probe_tensors(manifest, tensors, es, selector=None, schemes=None, schedule=None, with_kurtosis=False,
                  threads=1, model_builder=model_from_checkpoint):
    """Probe one in-memory checkpoint; returns its TrajectoryPoint (no phase).

    Forward passes run with one torch intra-op thread, so a checkpoint probed on
    its own gives bitwise the same row as inside a sweep or a fork.
    """
    schemes = schemes if schemes is not None else [Int4GroupScheme(), Int8ChannelScheme()]
    step = manifest.step
    with single_threaded():
        point = TrajectoryPoint(step=step, ppl_fp32=perplexity(model_builder(manifest, tensors), es, threads).ppl)
        for scheme in schemes:
            ppl_col, gap_col = _scheme_columns(scheme)
            quantized = quantize_model(tensors, selector, scheme, threads)
            ppl_q = perplexity(model_builder(manifest, quantized), es, threads).ppl
            setattr(point, ppl_col, ppl_q)
            setattr(point, gap_col, gap(point.ppl_fp32, ppl_q))

    schedule = schedule if schedule is not None else schedule_of(manifest)
    if schedule is not None:
        try:
            point.lr = lr_at(schedule, step)
            point.lr_frac = point.lr / schedule.peak
        except ScheduleDomainError as e:
            logger.warning("No LR for step %d: %s", step, e)

    if with_kurtosis:
        try:
            point.kurtosis = pooled_weight_kurtosis(tensors, selector).excess_kurtosis
        except StatsError as e:
            logger.warning("No kurtosis for step %d: %s", step, e)
    return point


def probe_checkpoint(path, es, selector=None, schemes=None, schedule=None, with_kurtosis=False, threads=1):
    manifest, tensors = read_checkpoint(path)
    return probe_tensors(manifest, tensors, es, selector, schemes, schedule, with_kurtosis, threads)


# Ledger rows

def _point_to_model(run_id, point):
    return ProbeModel(run_id=run_id, **point.to_dict())


def _model_to_point(row):
    return TrajectoryPoint(**{name: getattr(row, name) for name in COLUMNS})


def ledger_points(session, run_id):
    rows = session.query(ProbeModel).filter_by(run_id=run_id).order_by(ProbeModel.step).all()
    return [_model_to_point(r) for r in rows]


def record_point(session, run_id, point):
    session.add(_point_to_model(run_id, point))
    commit_or_rollback(session)


def _digestible(value):
    if isinstance(value, np.ndarray):
        return hashlib.sha256(np.ascontiguousarray(value).tobytes()).hexdigest()
    if is_dataclass(value):
        return {"type": type(value).__name__, **asdict(value)}
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Cannot digest {type(value).__name__}")


def config_digest(**parts):
    """Stable hex digest of everything that determines a run's probes."""
    text = json.dumps(parts, sort_keys=True, default=_digestible)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def clear_run(session, run_id):
    session.query(ProbeModel).filter_by(run_id=run_id).delete()
    session.query(FailureModel).filter_by(run_id=run_id).delete()
    commit_or_rollback(session)


def bind_run(session, run_id, kind, digest):
    """The ledger row of `run_id` for the configuration `digest`.

    Rows recorded under a different configuration are dropped, so they are
    probed again instead of being read back.
    """
    run = session.get(RunModel, run_id)
    if run is None:
        run = RunModel(run_id=run_id, kind=kind, status=RUNNING, config_hash=digest)
        session.add(run)
    elif run.config_hash != digest:
        logger.warning("Ledger run %s was recorded with another configuration; discarding its rows", run_id)
        clear_run(session, run_id)
        run.config_hash = digest
        run.status = RUNNING
        run.message = None
    commit_or_rollback(session)
    return run


def sweep(root, es, selector=None, schemes=None, schedule=None, with_kurtosis=False, threads=1,
          session=None, run_id="audit", progress=False):
    """Probe every checkpoint under `root` and return the trajectory in step order.

    Steps already in the ledger for `run_id` under the same probe configuration
    are not probed again. A checkpoint that fails is logged, recorded as a
    failure and kept in the trajectory as a row with status "failed".
    """
    checkpoints = list_checkpoints(root)
    if not checkpoints:
        raise CheckpointError(f"No checkpoints found under {root}")

    run = None
    if session is not None:
        digest = config_digest(
            evalset=es, selector=selector, schemes=schemes, with_kurtosis=with_kurtosis,
            schedule=None if schedule is None else schedule_to_dict(schedule),
        )
        run = bind_run(session, run_id, "audit", digest)
    done = {p.step: p for p in ledger_points(session, run_id)} if session is not None else {}
    pending = [(step, path) for step, path in checkpoints if step not in done]
    logger.info("Sweeping %d checkpoints under %s (%d already probed)", len(checkpoints), root, len(done))

    def probe_one(item):
        step, path = item
        try:
            # across checkpoints the pool provides the parallelism
            inner = 1 if threads > 1 else threads
            return step, path, probe_checkpoint(path, es, selector, schemes, schedule, with_kurtosis, inner), None
        except (QuantAuditError, OSError) as e:
            return step, path, None, e

    points = dict(done)
    failures = []
    with single_threaded():
        if threads > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = pool.map(probe_one, pending)
                results = list(tqdm(results, total=len(pending), disable=None if progress else True, desc="sweep"))
        else:
            results = [probe_one(item) for item in tqdm(pending, disable=None if progress else True, desc="sweep")]

    for step, path, point, error in results:
        if error is not None:
            logger.warning("Probe of %s failed: %s", path, error)
            failures.append(SweepFailure(step=step, path=path, message=str(error)))
            if session is not None:
                session.add(FailureModel(run_id=run_id, step=step, path=path, message=str(error)))
                commit_or_rollback(session)
            points[step] = TrajectoryPoint(step=step, ppl_fp32=None, status=FAILED)
            continue
        if session is not None:
            record_point(session, run_id, point)
        points[step] = point

    if run is not None:
        run.status = DONE
        commit_or_rollback(session)
    ordered = [points[s] for s in sorted(points)]
    return SweepResult(points=ordered, failures=failures, probed=len(pending) - len(failures))


# Onset and phases

def detect_onset(points, window=DEFAULT_WINDOW, rel_tol=DEFAULT_REL_TOL):
    """Return (min_ppl_step, stall_step).

    min_ppl_step is the earliest step holding the lowest FP32 perplexity.
    stall_step is the first step at which the best perplexity so far has
    improved by at most rel_tol (relative) over the trailing `window` rows,
    or None if that never happens. Failed rows are ignored.
    """
    if window < 1:
        raise TrajectoryError(f"window must be >= 1, got {window}")
    _check_ordered(points)
    points = probed_rows(points)
    if len(points) < window + 1:
        raise TrajectoryError(f"Onset detection needs at least {window + 1} rows, got {len(points)}")

    ppl = np.array([p.ppl_fp32 for p in points], dtype=np.float64)
    min_index = int(np.argmin(ppl))
    best = np.minimum.accumulate(ppl)
    stall_step = None
    for i in range(window, len(points)):
        before = best[i - window]
        if before - best[i] <= rel_tol * before:
            stall_step = points[i].step
            break
    return points[min_index].step, stall_step


def _improvement_rates(points):
    """Relative FP32 perplexity drop per 1,000 steps over the interval ending at each row (None for row 0)."""
    rates = [None]
    for prev, cur in zip(points, points[1:]):
        rates.append((prev.ppl_fp32 - cur.ppl_fp32) / prev.ppl_fp32 / ((cur.step - prev.step) / 1000.0))
    return rates


def _rapid_learning_end(points, p1_rate, window):
    """Step of the last row before `window` consecutive rates below p1_rate, or None.

    Only full windows count: a short run of rates at the end of the trajectory
    never closes rapid learning.
    """
    rates = _improvement_rates(points)
    for i in range(1, len(points) - window + 1):
        if all(r < p1_rate for r in rates[i:i + window]):
            return points[i - 1].step
    return None


def _summarize(phase, rows):
    if not rows:
        return PhaseSummary(phase=phase, n_rows=0)
    gaps = [p.gap_int4_pct for p in rows if p.gap_int4_pct is not None]
    return PhaseSummary(
        phase=phase, n_rows=len(rows), first_step=rows[0].step, last_step=rows[-1].step,
        ppl_start=rows[0].ppl_fp32, ppl_end=rows[-1].ppl_fp32,
        gap_mean=float(np.mean(gaps)) if gaps else None, gap_max=float(max(gaps)) if gaps else None,
    )


def segment_phases(points, p1_rate=DEFAULT_P1_RATE, window=DEFAULT_WINDOW, rel_tol=DEFAULT_REL_TOL):
    """Split a trajectory into rapid learning (1), refinement (2) and post-minimum (3).

    Phase labels are written onto the rows. Trajectories the rules cannot fully
    resolve still get labels, with `partial` set and the cause in `reason`.
    """
    _check_ordered(points)
    labelled = points
    points = probed_rows(points)
    if not points:
        raise TrajectoryError("Cannot segment a trajectory without probed rows")
    reasons = []

    ppl = [p.ppl_fp32 for p in points]
    min_index = int(np.argmin(ppl))
    min_ppl_step = points[min_index].step
    stall_step = None
    if len(points) >= window + 1:
        _, stall_step = detect_onset(points, window, rel_tol)
    else:
        reasons.append(f"trajectory too short for onset detection ({len(points)} rows)")

    boundary_23 = min_ppl_step
    if min_index == len(points) - 1:
        reasons.append("perplexity minimum at final checkpoint; phase 3 empty")

    boundary_12 = _rapid_learning_end(points, p1_rate, window)
    if boundary_12 is None or boundary_12 >= boundary_23:
        reasons.append("no rapid-learning exit before the perplexity minimum; phase 2 empty")
        boundary_12 = boundary_23

    for p in labelled:
        p.phase = None
    for p in points:
        p.phase = 1 if p.step <= boundary_12 else 2 if p.step <= boundary_23 else 3

    phases = [_summarize(k, [p for p in points if p.phase == k]) for k in (1, 2, 3)]
    return PhaseReport(
        boundary_12=boundary_12, boundary_23=boundary_23, min_ppl_step=min_ppl_step,
        min_ppl_value=float(ppl[min_index]), stall_step=stall_step, partial=bool(reasons),
        reason="; ".join(reasons) or None, phases=phases,
    )


def phase3_correlation(points):
    """Pearson r between weight kurtosis and INT4 gap over the phase-3 rows."""
    rows = [p for p in points if p.phase == 3 and p.kurtosis is not None and p.gap_int4_pct is not None]
    if len(rows) < 2:
        raise StatsError(f"Need at least 2 phase-3 rows with kurtosis and INT4 gap, got {len(rows)}")
    return pearson([p.kurtosis for p in rows], [p.gap_int4_pct for p in rows])


# Export

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _report_rows(report):
    header = {k: getattr(report, k) for k in REPORT_COLUMNS if hasattr(report, k) and k != "phase"}
    return [{**asdict(summary), **header} for summary in report.phases]


def export(obj, fmt, path):
    """Write a trajectory (list of TrajectoryPoint) or a PhaseReport as CSV or JSON."""
    if fmt not in ("csv", "json"):
        raise ConfigError(f"Unknown export format {fmt!r}; expected csv or json")
    if isinstance(obj, PhaseReport):
        columns, rows, document = REPORT_COLUMNS, _report_rows(obj), obj.to_dict()
    else:
        columns = COLUMNS
        rows = [p.to_dict() for p in obj]
        document = rows

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        if fmt == "json":
            json.dump(document, f, indent=2)
            f.write("\n")
        else:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row.get(c)) for c in columns])
    os.replace(tmp, path)
    return path


def load_trajectory(path):
    """Read a trajectory written by export(); the format follows the file extension."""
    with open(path, encoding="utf-8", newline="") as f:
        if path.endswith(".json"):
            raw = json.load(f)
        else:
            raw = list(csv.DictReader(f))
    try:
        points = [TrajectoryPoint.from_dict(row) for row in raw]
    except (ValidationError, TypeError) as e:
        raise TrajectoryError(f"{path}: invalid trajectory row: {e}") from e
    _check_ordered(points)
    return points
