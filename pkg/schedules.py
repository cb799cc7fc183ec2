"""
schedules.py

Learning-rate schedules evaluable at any step: cosine with linear warmup,
SGDR warm restarts, and Oscillatory Lock-In (short high-LR bumps alternating
with cool phases that follow the base cosine).
"""
import math
from dataclasses import asdict, dataclass, field

from errors import ConfigError, QuantAuditError, ScheduleDomainError
from schemas import CosineWarmupSchema, OLISchema, SGDRSchema

BUMP = "bump"
COOL = "cool"


@dataclass(frozen=True)
class CosineWarmup:
    eta_max: float = 6e-4
    eta_min: float = 6e-5
    warmup_steps: int = 1430
    total_steps: int = 143000
    kind: str = field(default="cosine", init=False)

    def __post_init__(self):
        if not 0 < self.eta_min <= self.eta_max:
            raise ConfigError(f"Need 0 < eta_min <= eta_max, got {self.eta_min}, {self.eta_max}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"Need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")

    @property
    def peak(self):
        return self.eta_max


@dataclass(frozen=True)
class SGDRSpec:
    eta_max: float = 6e-4
    eta_min: float = 6e-5
    period: int = 10000
    fork_step: int = 0
    kind: str = field(default="sgdr", init=False)

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError(f"SGDR period must be >= 1, got {self.period}")
        if not 0 < self.eta_min <= self.eta_max:
            raise ConfigError(f"Need 0 < eta_min <= eta_max, got {self.eta_min}, {self.eta_max}")

    @property
    def peak(self):
        return self.eta_max


@dataclass(frozen=True)
class OLISpec:
    base: CosineWarmup = field(default_factory=CosineWarmup)
    bump_multiplier: float = 5.0
    bump_len: int = 75
    cool_len: int = 300
    fork_step: int = 0
    kind: str = field(default="oli", init=False)

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("OLI period (bump_len + cool_len) must be >= 1")

    @property
    def period(self):
        return self.bump_len + self.cool_len

    @property
    def bump_lr(self):
        return self.bump_multiplier * self.base.eta_max

    @property
    def peak(self):
        return self.base.eta_max


def _cosine_lr(spec, step):
    if step < 0 or step > spec.total_steps:
        raise ScheduleDomainError(f"Step {step} outside cosine schedule domain [0, {spec.total_steps}]")
    if step < spec.warmup_steps:
        return spec.eta_max * step / spec.warmup_steps
    progress = (step - spec.warmup_steps) / (spec.total_steps - spec.warmup_steps)
    if progress == 1.0:
        return spec.eta_min
    return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + math.cos(math.pi * progress))


def _check_forked(spec, step):
    if step < spec.fork_step:
        raise ScheduleDomainError(f"Step {step} precedes the schedule's fork step {spec.fork_step}")


def lr_at(spec, step):
    step = int(step)
    if isinstance(spec, CosineWarmup):
        return _cosine_lr(spec, step)
    if isinstance(spec, SGDRSpec):
        _check_forked(spec, step)
        position = (step - spec.fork_step) % spec.period
        if position == 0:
            return spec.eta_max
        return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + math.cos(math.pi * position / spec.period))
    if isinstance(spec, OLISpec):
        if classify_step(spec, step) == BUMP:
            return spec.bump_lr
        return _cosine_lr(spec.base, step)
    raise QuantAuditError(f"Unknown schedule type {type(spec).__name__}")


def classify_step(spec, step):
    """Bump while (step - fork_step) mod period < bump_len; each period starts with its bump."""
    _check_forked(spec, step)
    return BUMP if (step - spec.fork_step) % spec.period < spec.bump_len else COOL


def emit_curve(spec, start, end, stride):
    """(step, lr) samples over [start, end) every `stride` steps."""
    if start > end:
        raise ScheduleDomainError(f"start {start} is after end {end}")
    if stride < 1:
        raise ScheduleDomainError(f"stride must be >= 1, got {stride}")
    return [(step, lr_at(spec, step)) for step in range(start, end, stride)]


def calibrate_bump_amplitude(K, scale_median, grad_median, eta_max, cap_multiplier=5.0):
    """min(K * scale_median / grad_median, cap_multiplier * eta_max)."""
    if not grad_median > 0:
        raise QuantAuditError(f"grad_median must be positive, got {grad_median}")
    return min(K * scale_median / grad_median, cap_multiplier * eta_max)


def schedule_from_dict(data):
    """Build a schedule from its JSON form, dispatching on "kind" (default cosine)."""
    data = dict(data or {})
    kind = data.get("kind", "cosine")
    if kind == "cosine":
        loaded = CosineWarmupSchema().load(data)
        loaded.pop("kind")
        return CosineWarmup(**loaded)
    if kind == "sgdr":
        loaded = SGDRSchema().load(data)
        loaded.pop("kind")
        return SGDRSpec(**loaded)
    if kind == "oli":
        loaded = OLISchema().load(data)
        loaded.pop("kind")
        base = loaded.pop("base")
        base.pop("kind")
        return OLISpec(base=CosineWarmup(**base), **loaded)
    raise ConfigError(f"Unknown schedule kind {kind!r}; expected cosine, sgdr or oli")


def schedule_to_dict(spec):
    data = asdict(spec)
    if isinstance(spec, OLISpec):
        data["base"] = asdict(spec.base)
    return data
