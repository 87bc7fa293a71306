"""Walkthrough of the value-aware two-region codec on post-softmax data.

Softmax outputs are extremely lopsided: most values sit near zero, a few near
the top. A single uniform scale either crushes the small values to zero or
wastes range. The codec quantizes on a fine 9-bit grid first (b=6, m=4), then
stores small codes verbatim and large codes by their top bits, one region bit
each -- 6 stored bits per element either way.
"""

import numpy as np

from twoscale import (KIND_SOFTMAX, V2sfParams, mse, twin_region_encode,
                      v2sf_bits_per_element, v2sf_decode, v2sf_encode)
from twoscale.quant import QuantParams, quantize_dequantize
from twoscale.search import candidate_grid

rng = np.random.default_rng(0)

# softmax of one attention row: 197 logits, like a 14x14-patch image plus cls
logits = rng.standard_normal((32, 197))
e = np.exp(logits - logits.max(axis=1, keepdims=True))
probs = e / e.sum(axis=1, keepdims=True)
print(f"tensor: {probs.shape}, max {probs.max():.4f}, "
      f"median {np.median(probs):.5f}  <- heavy mass near zero")

params = V2sfParams(kind=KIND_SOFTMAX, bits=6, shift=4,
                    scale_small=float(probs.max()) / 500)
print(f"\nfine scale s_s = {params.scale_small:.2e}, coarse scale "
      f"s_l = 2^{params.shift} * s_s = {params.scale_large:.2e}")
print(f"initial grid: {params.extended_bits}-bit codes; region split at "
      f"{params.small_threshold}; stored bits per element: "
      f"{v2sf_bits_per_element(params)}")

encoded = v2sf_encode(probs, params)
decoded = v2sf_decode(encoded)
print(f"payload: {len(encoded.payload)} bytes for {probs.size} elements "
      f"({8 * len(encoded.payload) / probs.size:.2f} bits/elem)")
print(f"codec mse: {mse(probs, decoded):.3e}")

# three-way comparison at the same 6-bit budget, each with its best scale
grid_u = candidate_grid(float(probs.max()), 6, 100, 1.2)
best_u = min(mse(probs, quantize_dequantize(probs, QuantParams(scale=float(c), bits=6)))
             for c in grid_u)
tr = twin_region_encode(probs, KIND_SOFTMAX, 6, 4)
occ, total = tr.region2_bin_occupancy()
print(f"\nuniform (best scale):      mse {best_u:.3e}")
print(f"fixed twin-region:         mse {mse(probs, tr.decode()):.3e}  "
      f"(coarse bins used: {occ}/{total} -- the fixed 1/2^(b-1) scale is built "
      f"for values up to 1, but the data tops out at {probs.max():.2f})")

grid_v = candidate_grid(float(probs.max()), params.extended_bits + 1, 100, 1.2)
best_v, best_scale = min(
    ((mse(probs, v2sf_decode(v2sf_encode(probs, V2sfParams(
        kind=KIND_SOFTMAX, bits=6, shift=4, scale_small=float(c))))), float(c))
     for c in grid_v))
print(f"two-region codec (best):   mse {best_v:.3e}  at s_s {best_scale:.2e}")
