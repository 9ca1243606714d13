"""Uniform symmetric quantisation with straight-through gradients.

    q = clamp(round_half_away(x / s), lo, hi)

Signed narrow-range specs are zero-centred (2-bit gives the ternary set
{-1, 0, 1}); unsigned specs cover ``[0, 2**b - 1]`` and are used after
ReLU. There is one scale per tensor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

SUPPORTED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    signed: bool = True
    scale: float = 1.0
    narrow: bool = True

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bitwidth {self.bits} not in {SUPPORTED_BITS}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"quantiser scale must be positive and finite, got {self.scale}")

    @property
    def lo(self) -> int:
        if not self.signed:
            return 0
        return -(2 ** (self.bits - 1)) + (1 if self.narrow else 0)

    @property
    def hi(self) -> int:
        return 2 ** self.bits - 1 if not self.signed else 2 ** (self.bits - 1) - 1

    @property
    def levels(self) -> int:
        return self.hi - self.lo + 1

    def with_scale(self, scale: float) -> "QuantSpec":
        return replace(self, scale=float(scale))


def weight_spec(bits: int, scale: float = 1.0) -> QuantSpec:
    return QuantSpec(bits, signed=True, scale=scale, narrow=True)


def act_spec(bits: int, scale: float = 1.0) -> QuantSpec:
    return QuantSpec(bits, signed=False, scale=scale, narrow=False)


INPUT_SPEC = QuantSpec(8, signed=True, scale=1.0 / 128.0, narrow=False)


@dataclass
class QTensor:
    values: np.ndarray
    spec: QuantSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.size and (self.values.min() < self.spec.lo or self.values.max() > self.spec.hi):
            raise ValueError("integer values outside the quantiser range")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def round_half_away(x):
    """Round to nearest integer, ties away from zero (sign-symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantise non-finite values")


def quantize_values(x, spec: QuantSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    return np.clip(round_half_away(x / spec.scale), spec.lo, spec.hi).astype(np.int64)


def quantize(x, spec: QuantSpec) -> QTensor:
    return QTensor(quantize_values(x, spec), spec)


def dequantize(q: QTensor) -> np.ndarray:
    return q.spec.scale * q.values.astype(np.float64)


def fake_quant(x, spec: QuantSpec) -> np.ndarray:
    return spec.scale * quantize_values(x, spec).astype(np.float64)


def ste_mask(x, spec: QuantSpec) -> np.ndarray:
    """Saturating straight-through gradient: 1 where the clamp is inactive, else 0.

    The clamp is inactive when ``round(x/s)`` already lies in ``[lo, hi]``,
    i.e. for ``x/s`` within half a step of the outermost levels.
    """
    r = round_half_away(np.asarray(x, dtype=np.float64) / spec.scale)
    return ((r >= spec.lo) & (r <= spec.hi)).astype(np.float64)


def scale_grad(x, spec: QuantSpec) -> np.ndarray:
    """d fake_quant(x) / d scale under the learned-step convention.

    Where the clamp is inactive this is ``q - x/s``; saturated inputs
    contribute the clamp level (``hi`` above, ``lo`` below).
    """
    r = np.asarray(x, dtype=np.float64) / spec.scale
    q = round_half_away(r)
    return np.where(q > spec.hi, float(spec.hi), np.where(q < spec.lo, float(spec.lo), q - r))


def calibrate_scale(x, spec: QuantSpec, mode: str = "max_abs") -> float:
    """``max|x| / hi``; falls back to 1.0 (with a warning) for an all-zero tensor.

    ``mode`` is ``max_abs`` for weight scales recomputed every step and
    ``learned_init`` for the one-off initial value of a trainable
    activation scale; both use the same statistic.
    """
    if mode not in ("max_abs", "learned_init"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    _check_finite(x)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        log.warning("all-zero tensor; using scale 1.0")
        return 1.0
    return peak / spec.hi
