"""Integer-only softmax: exponentials by shift, normalization by integer division.

Every input (already max-subtracted, so non-positive) splits as
x = -z*ln2 + p with p in (-ln2, 0]; exp(p) comes from a fixed-point quadratic
and the 2^-z factor is a right shift. No float touches the row after the
per-scale constants are built.
"""

import numpy as np

from twoscale import IntSoftmaxConfig, int_exp, int_softmax_row, max_relative_exp_error

cfg = IntSoftmaxConfig(scale_in=0.05)
print(f"input scale {cfg.scale_in}, {cfg.fraction_bits} fraction bits, "
      f"output codes are multiples of 2^-{cfg.bits_out}")

# the decomposition in action
for q in (0, -10, -40, -100):
    mantissa, z = int_exp(np.array([q]), cfg)
    approx = mantissa[0] / cfg.one * 2.0 ** -z[0]
    exact = np.exp(q * cfg.scale_in)
    print(f"q={q:5d}  x={q * cfg.scale_in:7.2f}  z={z[0]:2d}  "
          f"mantissa={mantissa[0]:>10d}  approx={approx:.6f}  exp={exact:.6f}")

err = max_relative_exp_error(cfg, lo=-10.0, points=100_000)
print(f"\nmax relative error vs float exp on [-10, 0] ({1e5:.0f} points): {err:.4%}")

# a row: codes in, probability codes out
rng = np.random.default_rng(3)
codes = rng.integers(-60, 60, size=10)
out, scale = int_softmax_row(codes, cfg)
ref = np.exp(codes * cfg.scale_in - (codes * cfg.scale_in).max())
ref = ref / ref.sum()
print(f"\nrow codes:   {codes.tolist()}")
print(f"prob codes:  {out.tolist()}  (sum {int(out.sum())} of {1 << cfg.bits_out})")
print(f"int probs:   {np.round(out * scale, 4).tolist()}")
print(f"float probs: {np.round(ref, 4).tolist()}")
print(f"argmax preserved: {np.argmax(out) == np.argmax(codes)}")

# shift invariance is exact: the row max cancels in integer arithmetic
shifted, _ = int_softmax_row(codes + 1000, cfg)
print(f"adding +1000 to every code changes nothing: {np.array_equal(out, shifted)}")
