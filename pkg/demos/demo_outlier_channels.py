"""Outlier-aware dual scaling on LayerNorm-style inputs.

Transformer LayerNorm inputs carry a few channels whose magnitudes dwarf the
rest. One shared scale must cover the outliers, so normal channels lose almost
all their resolution. Clustering the per-channel absolute maxima marks the
outlier channels (1 mask bit per channel); they get their own scale s_o while
everyone else uses s_n = s_o >> k.
"""

import numpy as np

from twoscale import (O2sfParams, channelwise_shift_select, detect_outlier_channels,
                      mse, o2sf_qdq, shift_candidates)
from twoscale.quant import QuantParams, quantize_dequantize

rng = np.random.default_rng(7)

channels = 32
x = rng.normal(0.0, 1.0, (256, channels))
outlier_cols = [4, 19, 27]
x[:, outlier_cols] *= 40  # a few channels dominate, like real LN inputs

abs_max = np.abs(x).max(axis=0)
print(f"channel abs-max: median {np.median(abs_max):.2f}, "
      f"max {abs_max.max():.2f}  (ratio {abs_max.max() / np.median(abs_max):.0f}x)")

part = detect_outlier_channels(abs_max)
print(f"detected outlier channels: {part.outlier_indices} "
      f"(threshold {part.threshold:.2f})")

# dual-scale vs the best single scale, both at 8 bits
s_o = float(abs_max.max()) / 127
print(f"\ns_o = {s_o:.4f}; candidate s_n values: "
      f"{[f'{c:.5f}' for c in shift_candidates(s_o, 6)]}")

best_dual = min(
    (mse(x, o2sf_qdq(x, O2sfParams(outlier_mask=part.mask(channels),
                                   scale_outlier=s_o, shift=k, bits=8))), k)
    for k in range(7))
best_single = min(
    mse(x, quantize_dequantize(x, QuantParams(scale=float(s), bits=8)))
    for s in np.linspace(1e-3, s_o * 1.2, 200))
print(f"best single scale mse: {best_single:.5f}")
print(f"dual-scale mse:        {best_dual[0]:.5f}  (s_n = s_o >> {best_dual[1]})")

# the channel-wise alternative pays 2 bits per channel for its index
sel = channelwise_shift_select(x, s_o, bits=8)
print(f"\nper-channel shift-select indices (2 bits/channel): "
      f"{np.bincount(sel.indices, minlength=4).tolist()} channels at shifts 0..3")
print(f"mask overhead comparison: dual-scale 1 bit/channel, "
      f"shift-select {sel.overhead_bits_per_channel} bits/channel")
