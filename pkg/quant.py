"""
quant.py

Calibration-free fake-quantization probes: asymmetric per-group INT4 and
symmetric per-channel INT8, plus the perplexity gap between a model and its
quantized copy.

All arithmetic runs in float64 and results are stored back as float32.
Rounding is round-half-to-even (np.rint) everywhere.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from errors import NonFiniteError, QuantAuditError, ShapeMismatchError
from weightstore import CheckpointManifest, select_quantizable

EPS_RANGE = 1e-12

PER_BLOCK = "per_block"
PER_ROW_GROUP = "per_row_group"


@dataclass(frozen=True)
class Int4GroupScheme:
    group_size: int = 128
    scale_scope: str = PER_BLOCK
    q_min: int = 0
    q_max: int = 15
    name: str = "int4"

    def __post_init__(self):
        if self.group_size < 1:
            raise QuantAuditError(f"group_size must be >= 1, got {self.group_size}")
        if self.scale_scope not in (PER_BLOCK, PER_ROW_GROUP):
            raise QuantAuditError(f"Unknown scale_scope {self.scale_scope!r}")
        if self.q_min != 0 or self.q_max < 1:
            raise QuantAuditError("Group schemes use codes 0..q_max with q_max >= 1")


@dataclass(frozen=True)
class Int8ChannelScheme:
    q_max: int = 127
    name: str = "int8"


@dataclass(frozen=True)
class Int4GroupParams:
    scale: float
    zero_point: int
    degenerate: bool


@dataclass(frozen=True)
class GapRecord:
    ppl_fp: float
    ppl_q: float
    gap_pct: float


def _require_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def int4_group_params(group, q_max=15):
    """Scale and zero-point of one group: s = (max - min) / q_max, z = rint(-min / s)."""
    values = np.asarray(group, dtype=np.float64).ravel()
    if values.size == 0:
        raise QuantAuditError("Cannot quantize an empty group")
    _require_finite(values, "group")

    lo, hi = float(values.min()), float(values.max())
    if hi - lo < EPS_RANGE:
        return Int4GroupParams(scale=1.0, zero_point=0, degenerate=True)
    scale = (hi - lo) / q_max
    zero_point = int(min(max(np.rint(-lo / scale), 0), q_max))
    return Int4GroupParams(scale=scale, zero_point=zero_point, degenerate=False)


def fake_quant(values, s, z, q_min, q_max):
    """Quantize-dequantize: s * (clamp(rint(w / s + z), q_min, q_max) - z)."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise QuantAuditError("Quantization scale must be positive")
    w = np.asarray(values, dtype=np.float64)
    codes = np.clip(np.rint(w / s + z), q_min, q_max)
    return s * (codes - z)


def _group_bounds(d_in, group_size):
    return [(start, min(start + group_size, d_in)) for start in range(0, d_in, group_size)]


def _check_2d(W, what):
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeMismatchError(f"{what} expects a 2-D tensor, got shape {list(W.shape)}")
    _require_finite(W, what)
    return W.astype(np.float64)


def _group_scales(block, q_max, scope):
    """Per-scope (scale, zero_point, degenerate) arrays broadcastable against `block`."""
    axis = None if scope == PER_BLOCK else 1
    lo = block.min(axis=axis, keepdims=True)
    hi = block.max(axis=axis, keepdims=True)
    degenerate = (hi - lo) < EPS_RANGE
    scale = np.where(degenerate, 1.0, (hi - lo) / q_max)
    zero_point = np.clip(np.rint(-lo / scale), 0, q_max)
    return scale, zero_point, degenerate


def quantize_tensor_group(W, group_size=128, scale_scope=PER_BLOCK, q_max=15):
    """Asymmetric per-group fake quantization along the input dimension (columns)."""
    W = _check_2d(W, "per-group quantization")
    out = np.empty_like(W)
    for start, stop in _group_bounds(W.shape[1], group_size):
        block = W[:, start:stop]
        scale, zero_point, degenerate = _group_scales(block, q_max, scale_scope)
        quantized = fake_quant(block, scale, zero_point, 0, q_max)
        # constant groups are representable as-is
        out[:, start:stop] = np.where(degenerate, block, quantized)
    return out.astype(np.float32)


def quantize_tensor_int4(W, scheme=None):
    scheme = scheme or Int4GroupScheme()
    return quantize_tensor_group(W, scheme.group_size, scheme.scale_scope, scheme.q_max)


def int4_scale_map(W, scheme=None):
    """The scale s_k of every element's group, shaped like W (NaN for degenerate groups)."""
    scheme = scheme or Int4GroupScheme()
    W = _check_2d(W, "scale map")
    scales = np.empty_like(W)
    for start, stop in _group_bounds(W.shape[1], scheme.group_size):
        block = W[:, start:stop]
        scale, _, degenerate = _group_scales(block, scheme.q_max, scheme.scale_scope)
        scales[:, start:stop] = np.broadcast_to(np.where(degenerate, np.nan, scale), block.shape)
    return scales


def quantize_tensor_int8(W, scheme=None):
    """Symmetric per-output-row quantization with s_j = max|W_j| / 127 and zero-point 0."""
    scheme = scheme or Int8ChannelScheme()
    W = _check_2d(W, "per-channel quantization")
    max_abs = np.abs(W).max(axis=1, keepdims=True)
    zero_rows = max_abs < EPS_RANGE
    scale = np.where(zero_rows, 1.0, max_abs / scheme.q_max)
    quantized = fake_quant(W, scale, 0, -scheme.q_max, scheme.q_max)
    return np.where(zero_rows, 0.0, quantized).astype(np.float32)


def quantize(W, scheme):
    if isinstance(scheme, Int8ChannelScheme):
        return quantize_tensor_int8(W, scheme)
    return quantize_tensor_int4(W, scheme)


def quantize_model(tensors, selector=None, scheme=None, threads=1):
    """Return a copy of `tensors` with the selected ones fake-quantized.

    Tensors are independent, so the output does not depend on `threads`.
    """
    scheme = scheme or Int4GroupScheme()
    manifest = CheckpointManifest.for_tensors(0, tensors)
    names = select_quantizable(manifest, selector)

    out = dict(tensors)
    if threads and threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda n: quantize(tensors[n], scheme), names))
    else:
        results = [quantize(tensors[n], scheme) for n in names]
    for name, result in zip(names, results):
        out[name] = result
    return out


def gap(ppl_fp, ppl_q):
    """Relative perplexity degradation in percent; negative when quantization helps."""
    if not ppl_fp > 0:
        raise QuantAuditError(f"Full-precision perplexity must be positive, got {ppl_fp}")
    return 100.0 * (ppl_q - ppl_fp) / ppl_fp


def probe_gap(ppl_fp, ppl_q):
    return GapRecord(ppl_fp=float(ppl_fp), ppl_q=float(ppl_q), gap_pct=gap(ppl_fp, ppl_q))


def parse_scheme(name, group_size=128, scale_scope=PER_BLOCK):
    if name == "int4":
        return Int4GroupScheme(group_size=group_size, scale_scope=scale_scope)
    if name == "int8":
        return Int8ChannelScheme()
    raise QuantAuditError(f"Unknown quantization scheme {name!r}; expected int4 or int8")
