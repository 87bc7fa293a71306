"""End to end on the toy transformer block: calibrate, then run both modes.

The alternating search sweeps weight and activation scale grids per layer
(gradient-weighted distortion when gradients are supplied, plain MSE here),
the codec sites get the two-region treatment, LayerNorm inputs the dual-scale
outlier handling, and the integer path accumulates nothing but codes.
"""

import numpy as np

from twoscale import BlockSpec, SearchConfig, calibrate_model, init_weights
from twoscale.block import capture_calibration, fp_forward, sample_inputs
from twoscale.pipeline import MODE_FAKE, MODE_INTEGER, default_pipeline, quant_forward

spec = BlockSpec()  # 16-dim, 2 heads, 8 tokens, seeded
weights = init_weights(spec)
xs = sample_inputs(spec, 32, seed=0)
bundle = capture_calibration(spec, weights, xs)
print(f"captured {len(bundle)} calibration tensors from {xs.shape[0]} samples")

cfg = SearchConfig(rounds=3, num_candidates=100, seed=0)
calib = calibrate_model(bundle, spec, weights, cfg)
print(f"calibrated {len(calib.layers)} layers "
      f"(rounds={cfg.rounds}, candidates={cfg.num_candidates})")
for name, layer in calib.layers.items():
    metrics = " -> ".join(f"{m:.3e}" for m in layer.round_metrics)
    print(f"  {name:18s} {layer.scheme:8s} rounds: {metrics}")

params = calib.site_params()
x = xs[0]
fp = fp_forward(spec, weights, x)

fake = quant_forward(spec, weights, default_pipeline(8, 8, mode=MODE_FAKE), params, x)
integer = quant_forward(spec, weights, default_pipeline(8, 8, mode=MODE_INTEGER),
                        params, x)
print(f"\n8-bit fake-quant output error:    {np.abs(fake.output - fp).max():.5f}")
print(f"8-bit integer-path output error:  {np.abs(integer.output - fp).max():.5f}")
print(f"integer matmuls: {integer.matmul_count}, float-in-accumulator "
      f"violations: {integer.float_in_accumulator_violations}")

print(f"\n{'site':20s} {'scheme':8s} {'sqnr (dB)':>10s}")
for site, entry in sorted(integer.site_report.items()):
    print(f"{site:20s} {entry['scheme']:8s} {entry['sqnr_db']:10.2f}")
