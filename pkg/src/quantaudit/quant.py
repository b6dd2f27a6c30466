"""Calibration-free fake-quantization probes and the gap metric.

Two schemes:

* asymmetric per-group low-bit quantization (default 16 levels, group size
  128 along the input dimension, one scale/zero-point per group block);
* symmetric per-channel INT8 (one scale per output row, zero-point 0).

No calibration data, no rounding optimization, no rotation -- the probes
measure how well the raw weights sit on the integer grid.  All arithmetic
runs in float64 and results are stored back as float32 so the probe is free
of platform-dependent rounding noise.  Rounding is half-to-even throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .weightstore import QuantSelector

EPS_RANGE = 1e-12


class QuantError(Exception):
    """Raised for invalid probe inputs (wrong rank, NaN/Inf, bad scale)."""


@dataclass
class Int4GroupScheme:
    """Asymmetric per-group scheme; defaults give the 16-level INT4 probe.

    ``scale_scope`` chooses whether a group is the full d_out x g block
    (one scale per column group, the default) or one row's slice of it
    (per_row_group, the common deployment layout).
    """

    group_size: int = 128
    scale_scope: str = "per_block"  # or "per_row_group"
    q_min: int = 0
    q_max: int = 15

    def __post_init__(self):
        if self.group_size < 1:
            raise QuantError(f"group_size must be >= 1, got {self.group_size}")
        if self.scale_scope not in ("per_block", "per_row_group"):
            raise QuantError(f"unknown scale_scope {self.scale_scope!r}")
        if self.q_max <= self.q_min:
            raise QuantError("q_max must exceed q_min")

    @property
    def n_levels(self) -> int:
        return self.q_max - self.q_min + 1


@dataclass
class Int8ChannelScheme:
    """Symmetric per-output-row INT8: s_j = max|row|/127, zero-point 0."""

    q_max: int = 127


@dataclass
class Int4GroupParams:
    """Scale/zero-point for one group; degenerate = constant group."""

    scale: float
    zero_point: int
    degenerate: bool = False


@dataclass
class GapRecord:
    """FP32 vs quantized perplexity and their relative gap in percent."""

    ppl_fp: float
    ppl_q: float
    gap_pct: float = field(init=False)

    def __post_init__(self):
        self.gap_pct = gap(self.ppl_fp, self.ppl_q)


def gap(ppl_fp: float, ppl_q: float) -> float:
    """Relative perplexity degradation in percent; negative if ppl_q < ppl_fp."""
    if not ppl_fp > 0:
        raise QuantError(f"ppl_fp must be positive, got {ppl_fp}")
    return 100.0 * (ppl_q - ppl_fp) / ppl_fp


def int4_group_params(group: np.ndarray, q_min: int = 0, q_max: int = 15) -> Int4GroupParams:
    """Scale and zero-point for one group: s = range/(q_max-q_min), z = round(-min/s)."""
    g = np.asarray(group, dtype=np.float64)
    if g.size == 0:
        raise QuantError("empty group")
    if not np.all(np.isfinite(g)):
        raise QuantError("non-finite values in group")
    lo = float(g.min())
    hi = float(g.max())
    if hi - lo < EPS_RANGE:
        return Int4GroupParams(scale=1.0, zero_point=0, degenerate=True)
    s = (hi - lo) / (q_max - q_min)
    z = int(np.clip(np.round(-lo / s), q_min, q_max))
    return Int4GroupParams(scale=s, zero_point=z)


def fake_quant(values: np.ndarray, s: float, z: int,
               q_min: int, q_max: int) -> np.ndarray:
    """Quantize-then-dequantize: s*(clamp(round(w/s + z), q_min, q_max) - z).

    Idempotent: applying it twice equals applying it once.
    """
    if not s > 0:
        raise QuantError(f"scale must be positive, got {s}")
    w = np.asarray(values, dtype=np.float64)
    codes = np.clip(np.round(w / s + z), q_min, q_max)
    return s * (codes - z)


def quantize_tensor_int4(W: np.ndarray, scheme: Int4GroupScheme | None = None) -> np.ndarray:
    """Fake-quantize a 2-D weight matrix group-by-group along the input dim.

    The last group may be partial.  Degenerate (constant) groups reconstruct
    the constant exactly.  Returns float32 of the same shape.
    """
    scheme = scheme or Int4GroupScheme()
    W = np.asarray(W)
    if W.ndim != 2:
        raise QuantError(f"per-group quantization needs a 2-D tensor, got ndim={W.ndim}")
    if not np.all(np.isfinite(W)):
        raise QuantError("non-finite values in weight tensor")
    W64 = W.astype(np.float64)
    out = np.empty_like(W64)
    g = scheme.group_size
    d_in = W.shape[1]
    for start in range(0, d_in, g):
        block = W64[:, start:start + g]
        if scheme.scale_scope == "per_block":
            out[:, start:start + g] = _fake_quant_group(block, scheme)
        else:
            for j in range(block.shape[0]):
                out[j, start:start + g] = _fake_quant_group(block[j], scheme)
    return out.astype(np.float32)


def _fake_quant_group(group: np.ndarray, scheme: Int4GroupScheme) -> np.ndarray:
    p = int4_group_params(group, scheme.q_min, scheme.q_max)
    if p.degenerate:
        return group
    return fake_quant(group, p.scale, p.zero_point, scheme.q_min, scheme.q_max)


def quantize_tensor_int8(W: np.ndarray, scheme: Int8ChannelScheme | None = None) -> np.ndarray:
    """Symmetric per-output-row fake quantization; all-zero rows pass through."""
    scheme = scheme or Int8ChannelScheme()
    W = np.asarray(W)
    if W.ndim != 2:
        raise QuantError(f"per-channel quantization needs a 2-D tensor, got ndim={W.ndim}")
    if not np.all(np.isfinite(W)):
        raise QuantError("non-finite values in weight tensor")
    W64 = W.astype(np.float64)
    max_abs = np.abs(W64).max(axis=1)
    live = max_abs >= EPS_RANGE
    scales = np.where(live, max_abs / scheme.q_max, 1.0)
    codes = np.clip(np.round(W64 / scales[:, None]), -scheme.q_max, scheme.q_max)
    out = np.where(live[:, None], scales[:, None] * codes, W64)
    return out.astype(np.float32)


def quantize_model(tensors: dict[str, np.ndarray],
                   selector: QuantSelector | None = None,
                   scheme: Int4GroupScheme | Int8ChannelScheme | None = None,
                   ) -> dict[str, np.ndarray]:
    """Fake-quantize the selected tensors; everything else passes through untouched."""
    selector = selector or QuantSelector()
    scheme = scheme or Int4GroupScheme()
    out: dict[str, np.ndarray] = {}
    for name in sorted(tensors):
        W = tensors[name]
        if selector.matches(name, np.asarray(W).ndim):
            if isinstance(scheme, Int8ChannelScheme):
                out[name] = quantize_tensor_int8(W, scheme)
            else:
                out[name] = quantize_tensor_int4(W, scheme)
        else:
            out[name] = W
    return out
