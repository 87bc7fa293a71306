import math

import numpy as np
import pytest

from twoscale.quant import (QuantParams, QuantizationError, SQNR_INF, calibrate_uniform,
                            dequantize, mse, quantize, quantize_dequantize,
                            round_half_away, sqnr_db)


def ref_round_half_away(x: float) -> int:
    # independent scalar rounding oracle
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def test_round_half_away_matches_scalar_oracle():
    xs = [0.0, 0.5, 1.5, 2.5, -0.5, -2.5, 2.4999, -2.4999, 3.5001]
    got = round_half_away(np.array(xs))
    assert got.tolist() == [float(ref_round_half_away(x)) for x in xs]


def test_calibrate_basic_rule():
    p = calibrate_uniform(np.array([0.2, 1.0, -0.4], dtype=np.float32), 8)
    assert p.scale == 1.0 / 255
    assert p.zero_point == 0


def test_calibrate_degenerate_rules():
    assert calibrate_uniform(np.zeros(4, dtype=np.float32), 8).scale == 1.0
    p = calibrate_uniform(np.array([-2.0, -0.5], dtype=np.float32), 8)
    assert p.scale == 2.0 / 255
    with pytest.raises(QuantizationError):
        calibrate_uniform(np.zeros(0, dtype=np.float32), 8)


def test_quantize_zero_and_clamp():
    p = QuantParams(scale=0.1, bits=8)
    assert quantize(np.array([0.0]), p).codes.tolist() == [0]
    x = 0.1 * (128 + 5)  # above the top code
    assert quantize(np.array([x]), p).codes.tolist() == [127]
    assert quantize(np.array([-100.0]), p).codes.tolist() == [-128]


def test_quantize_rounding_mode():
    p = QuantParams(scale=1.0, bits=8)
    assert quantize(np.array([2.5]), p).codes.tolist() == [3]
    assert quantize(np.array([-2.5]), p).codes.tolist() == [-3]


def test_dequantize_and_idempotence():
    p = QuantParams(scale=0.01, bits=8)
    q = quantize(np.zeros(3), p)
    assert dequantize(q).tolist() == [0.0, 0.0, 0.0]
    assert np.isclose(dequantize(quantize(np.array([127 * 0.01]), p))[0], 1.27)

    rng = np.random.default_rng(0)
    t = rng.standard_normal(256).astype(np.float32)
    p2 = calibrate_uniform(np.abs(t), 8)
    q1 = quantize(t, p2)
    q2 = quantize(dequantize(q1), p2)  # fixed-point oracle
    assert np.array_equal(q1.codes, q2.codes)


def test_error_bound_for_in_range_values():
    rng = np.random.default_rng(1)
    p = QuantParams(scale=0.02, bits=8)
    t = rng.uniform(-0.02 * 120, 0.02 * 120, 500)  # strictly inside the clamp range
    err = np.abs(quantize_dequantize(t, p) - t)
    assert err.max() <= 0.02 / 2 + 1e-9


def test_codes_always_in_clamp_range():
    rng = np.random.default_rng(2)
    for bits in (2, 4, 8, 16):
        p = QuantParams(scale=0.05, bits=bits)
        q = quantize(rng.standard_normal(1000) * 100, p)
        assert q.codes.min() >= p.code_min
        assert q.codes.max() <= p.code_max


def test_mse_sqnr_hand_values():
    a = np.array([1.0, 1.0])
    assert mse(a, a) == 0.0
    assert sqnr_db(a, a) == SQNR_INF
    assert mse(a, np.zeros(2)) == 1.0
    assert sqnr_db(a, np.zeros(2)) == 0.0


def test_mse_sqnr_match_scalar_loop():
    rng = np.random.default_rng(3)
    ref = rng.standard_normal(64)
    test = ref + rng.standard_normal(64) * 0.1
    acc_err = acc_sig = 0.0
    for i in range(64):  # brute-force reference
        acc_err += (ref[i] - test[i]) ** 2
        acc_sig += ref[i] ** 2
    assert math.isclose(mse(ref, test), acc_err / 64, rel_tol=1e-12)
    assert math.isclose(sqnr_db(ref, test), 10 * math.log10(acc_sig / acc_err),
                        rel_tol=1e-12)


def test_metric_errors():
    with pytest.raises(QuantizationError):
        mse(np.zeros(2), np.zeros(3))
    with pytest.raises(QuantizationError):
        sqnr_db(np.zeros(2), np.ones(2))


def test_params_validation():
    with pytest.raises(QuantizationError):
        QuantParams(scale=0.0, bits=8)
    with pytest.raises(QuantizationError):
        QuantParams(scale=1.0, bits=1)
    with pytest.raises(QuantizationError):
        QuantParams(scale=1.0, bits=8, zero_point=1)
