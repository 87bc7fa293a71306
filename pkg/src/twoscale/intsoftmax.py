"""Integer-only softmax built on a fixed-point exponential approximation.

After the row max is subtracted in the integer domain, each non-positive input
x = q * s_in is decomposed as x = -z*ln2 + p with integer z >= 0 and
p in (-ln2, 0], then exp(p) is evaluated as the quadratic a*(p+b)^2 + c in
fixed point. Everything downstream of the per-scale constant setup is integer
multiply/add/shift, and the row normalization is an integer division, so rows
can run without touching floating point.

The quadratic coefficients follow the published integer-only exponential fit
on (-ln 2, 0]; they are exposed in the config and validated only through the
float-oracle tolerance test. Working values are carried in int64 with a
logical 32-bit width: FRACTION_BITS=30 keeps L(p) <= ~2^30 so a 4096-element
row sum stays far inside 64-bit accumulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRACTION_BITS = 30
DEFAULT_COEFF_A = 0.3585
DEFAULT_COEFF_B = 1.353
DEFAULT_COEFF_C = 0.344


class IntSoftmaxError(ValueError):
    pass


@dataclass(frozen=True)
class IntSoftmaxConfig:
    scale_in: float
    bits_in: int = 8
    bits_out: int = 16  # output codes are fractions with 2^-bits_out steps
    coeff_a: float = DEFAULT_COEFF_A
    coeff_b: float = DEFAULT_COEFF_B
    coeff_c: float = DEFAULT_COEFF_C
    fraction_bits: int = FRACTION_BITS

    def __post_init__(self):
        if not (self.scale_in > 0 and math.isfinite(self.scale_in)):
            raise IntSoftmaxError("scale_in must be positive and finite")
        if not 1 <= self.bits_out <= 24:
            raise IntSoftmaxError("bits_out must be in [1, 24]")
        # the fit must stay positive on (-ln2, 0] or probabilities go negative
        p = np.linspace(-math.log(2), 0.0, 257)
        if (self.coeff_a * (p + self.coeff_b) ** 2 + self.coeff_c).min() <= 0:
            raise IntSoftmaxError("coefficients must approximate exp positively on (-ln2, 0]")

    @property
    def one(self) -> int:
        return 1 << self.fraction_bits

    def fixed(self, x: float) -> int:
        return int(round(x * self.one))


def int_exp(q, cfg: IntSoftmaxConfig):
    """Fixed-point exp of non-positive codes: returns (mantissa, shift).

    exp(q * scale_in) ~= mantissa * 2^-fraction_bits * 2^-shift.
    """
    q = np.asarray(q, dtype=np.int64)
    if q.size and q.max() > 0:
        raise IntSoftmaxError("int_exp inputs must be non-positive (subtract the row max)")
    scale_fx = cfg.fixed(cfg.scale_in)
    ln2_fx = cfg.fixed(math.log(2))
    a_fx = cfg.fixed(cfg.coeff_a)
    b_fx = cfg.fixed(cfg.coeff_b)
    c_fx = cfg.fixed(cfg.coeff_c)
    x_fx = q * scale_fx
    z = (-x_fx) // ln2_fx
    p_fx = x_fx + z * ln2_fx  # in (-ln2_fx, 0]
    t = p_fx + b_fx
    sq = (t * t) >> cfg.fraction_bits
    mantissa = ((a_fx * sq) >> cfg.fraction_bits) + c_fx
    return mantissa, z


def int_softmax_row(codes, cfg: IntSoftmaxConfig):
    """Integer softmax over one row of codes: (probability codes, output scale).

    Output codes are unsigned fractions of 2^-bits_out and floor-normalized, so
    they sum to 2^bits_out within row-length units of the last place. Adding a
    constant to every input code cannot change the output (exact integer
    max-subtraction), and the input argmax stays the output argmax.
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 1 or codes.size == 0:
        raise IntSoftmaxError("expected a non-empty 1-D row of codes")
    shifted = codes - codes.max()
    mantissa, z = int_exp(shifted, cfg)
    aligned = mantissa >> z  # tiny terms lose low bits only
    total = int(aligned.sum())
    if total <= 0:
        raise IntSoftmaxError("degenerate row: exponential sum underflowed to zero")
    out = (aligned << cfg.bits_out) // total
    out = np.minimum(out, (1 << cfg.bits_out) - 1)
    return out.astype(np.int64), 1.0 / (1 << cfg.bits_out)


def int_softmax(codes, cfg: IntSoftmaxConfig, axis: int = -1):
    """Row-wise integer softmax over the given axis of a code tensor."""
    codes = np.asarray(codes, dtype=np.int64)
    moved = np.moveaxis(codes, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.empty_like(flat)
    scale = 1.0 / (1 << cfg.bits_out)
    for i in range(flat.shape[0]):
        out[i], scale = int_softmax_row(flat[i], cfg)
    return np.moveaxis(out.reshape(moved.shape), -1, axis), scale


def max_relative_exp_error(cfg: IntSoftmaxConfig, lo: float = -10.0,
                           points: int = 100_000) -> float:
    """Max |int_exp - exp| / exp over a dense grid on [lo, 0] (tolerance report)."""
    grid_cfg = IntSoftmaxConfig(scale_in=-lo / points, bits_out=cfg.bits_out,
                                coeff_a=cfg.coeff_a, coeff_b=cfg.coeff_b,
                                coeff_c=cfg.coeff_c, fraction_bits=cfg.fraction_bits)
    q = -np.arange(points + 1, dtype=np.int64)
    mantissa, z = int_exp(q, grid_cfg)
    approx = mantissa.astype(np.float64) / grid_cfg.one * np.power(2.0, -z.astype(np.float64))
    exact = np.exp(q * grid_cfg.scale_in)
    return float(np.max(np.abs(approx - exact) / exact))
