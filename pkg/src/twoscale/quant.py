"""Uniform symmetric quantization core shared by every scheme.

Codes are b-bit two's-complement integers in [-2^(b-1), 2^(b-1)-1] with a
single positive scale per tensor and zero-point pinned to 0. The calibration
rule is max(x)/(2^b - 1) taken literally; for signed data this under-covers
one side, which the search modules compensate for with their own candidate
grids. Rounding is half-away-from-zero everywhere so coded outputs are
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BIT_WIDTH_MIN = 2
BIT_WIDTH_MAX = 16

SQNR_INF = math.inf  # sentinel for a zero-error comparison


class QuantizationError(ValueError):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bits: int
    zero_point: int = 0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise QuantizationError("zero_point is pinned to 0 (symmetric quantization only)")
        if not BIT_WIDTH_MIN <= self.bits <= BIT_WIDTH_MAX:
            raise QuantizationError(f"bits must be in [{BIT_WIDTH_MIN}, {BIT_WIDTH_MAX}]")

    @property
    def code_min(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def code_max(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int32, same shape as the source tensor
    params: QuantParams

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        if self.codes.size:
            lo, hi = self.codes.min(), self.codes.max()
            if lo < self.params.code_min or hi > self.params.code_max:
                raise QuantizationError(
                    f"codes [{lo}, {hi}] outside [{self.params.code_min}, {self.params.code_max}]"
                )

    @property
    def shape(self):
        return self.codes.shape


def calibrate_uniform(t: np.ndarray, bits: int) -> QuantParams:
    """Scale = max(x)/(2^b - 1); |min(x)| if the tensor is non-positive; 1 if all-zero."""
    t = np.asarray(t)
    if t.size == 0:
        raise QuantizationError("cannot calibrate an empty tensor")
    mx = float(t.max())
    denom = (1 << bits) - 1
    if mx > 0:
        scale = mx / denom
    else:
        mn = float(t.min())
        scale = abs(mn) / denom if mn < 0 else 1.0
    return QuantParams(scale=scale, bits=bits)


def quantize(t: np.ndarray, p: QuantParams) -> QuantizedTensor:
    codes = np.clip(round_half_away(np.asarray(t, dtype=np.float64) / p.scale),
                    p.code_min, p.code_max)
    return QuantizedTensor(codes=codes.astype(np.int32), params=p)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return (q.codes.astype(np.float64) * q.params.scale).astype(np.float32)


def quantize_dequantize(t: np.ndarray, p: QuantParams) -> np.ndarray:
    """Fake-quantization helper: one round trip through the code grid."""
    return dequantize(quantize(t, p))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise QuantizationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def sqnr_db(ref: np.ndarray, test: np.ndarray) -> float:
    """10*log10(signal energy / error energy); +inf sentinel when error is zero."""
    ref, test = np.asarray(ref, dtype=np.float64), np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise QuantizationError(f"shape mismatch {ref.shape} vs {test.shape}")
    signal = float(np.sum(ref * ref))
    if signal == 0.0:
        raise QuantizationError("SQNR undefined for a zero-signal reference")
    noise = float(np.sum((ref - test) ** 2))
    if noise == 0.0:
        return SQNR_INF
    return 10.0 * math.log10(signal / noise)
