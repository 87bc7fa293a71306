import numpy as np
import pytest

from twoscale import block as blk
from twoscale.calibrate import calibrate_model
from twoscale.pipeline import (COMPARE_SITES, MODE_FAKE, MODE_INTEGER, PipelineError,
                               QuantPipelineSpec, SiteSpec, _IntGuard,
                               AccumulatorOverflowError, compare_schemes,
                               default_pipeline, quant_forward)
from twoscale.search import SearchConfig


@pytest.fixture(scope="module")
def toy():
    spec = blk.BlockSpec()
    w = blk.init_weights(spec)
    xs = blk.sample_inputs(spec, 8, seed=0)
    bundle = blk.capture_calibration(spec, w, xs)
    return spec, w, xs, bundle


def calibrated_params(toy, bits):
    spec, w, xs, bundle = toy
    cfg = SearchConfig(bits_weights=bits, bits_activations=bits, rounds=2,
                       num_candidates=40, seed=0)
    return calibrate_model(bundle, spec, w, cfg, default_pipeline(bits, bits)
                           ).site_params()


def test_default_pipeline_covers_every_site():
    pipe = default_pipeline()
    assert set(pipe.sites) == set(blk.ACTIVATION_SITES) | set(blk.WEIGHT_SITES)
    assert pipe.sites[blk.SITE_POST_SOFTMAX].scheme == "v2sf"
    assert pipe.sites[blk.SITE_POST_GELU].v2sf_kind == "gelu"
    assert pipe.sites[blk.SITE_LN1_INPUT].scheme == "o2sf"
    assert pipe.sites[blk.SITE_LN2_INPUT].scheme == "o2sf"
    assert pipe.sites[blk.SITE_QKV_WEIGHTS].scheme == "uniform"


def test_pipeline_spec_validation():
    pipe = default_pipeline()
    broken = dict(pipe.sites)
    del broken[blk.SITE_POST_GELU]
    with pytest.raises(PipelineError):
        QuantPipelineSpec(sites=broken)
    broken = dict(pipe.sites)
    broken[blk.SITE_QKV_WEIGHTS] = SiteSpec(scheme="v2sf", bits=8, v2sf_kind="gelu")
    with pytest.raises(PipelineError):
        QuantPipelineSpec(sites=broken)


def test_fake_quant_16bit_converges(toy):
    spec, w, xs, _ = toy
    params = calibrated_params(toy, 16)
    pipe = default_pipeline(16, 16, mode=MODE_FAKE)
    for i in range(4):
        fp = blk.fp_forward(spec, w, xs[i])
        res = quant_forward(spec, w, pipe, params, xs[i])
        assert np.abs(res.output - fp).max() <= 1e-3


def test_integer_and_fake_agree_with_float_softmax(toy):
    spec, w, xs, _ = toy
    params = calibrated_params(toy, 8)
    for i in range(4):
        r_int = quant_forward(spec, w, default_pipeline(8, 8, mode=MODE_INTEGER),
                              params, xs[i], use_int_softmax=False)
        r_fake = quant_forward(spec, w, default_pipeline(8, 8, mode=MODE_FAKE),
                               params, xs[i])
        assert set(r_int.site_codes) == set(r_fake.site_codes)
        for site in r_int.site_codes:
            assert np.array_equal(r_int.site_codes[site], r_fake.site_codes[site]), site
        # the two outputs are built from identical codes, so they are close too
        assert np.abs(r_int.output - r_fake.output).max() <= 1e-5


def test_integer_path_pure(toy):
    spec, w, xs, _ = toy
    params = calibrated_params(toy, 8)
    res = quant_forward(spec, w, default_pipeline(8, 8, mode=MODE_INTEGER), params,
                        xs[0])
    assert res.float_in_accumulator_violations == 0
    # qkv + per-head logits + per-head attention + proj + fc1 + fc2
    assert res.matmul_count == 4 + 2 * spec.num_heads
    assert len(res.site_report) == len(blk.ACTIVATION_SITES) + len(blk.WEIGHT_SITES)
    for entry in res.site_report.values():
        assert np.isfinite(entry["mse"])


def test_quantization_preserves_shapes(toy):
    spec, w, xs, _ = toy
    params = calibrated_params(toy, 8)
    res = quant_forward(spec, w, default_pipeline(8, 8, mode=MODE_FAKE), params, xs[0])
    assert res.output.shape == (spec.seq_len, spec.embed_dim)
    assert res.site_codes[blk.SITE_POST_SOFTMAX].shape == (
        spec.num_heads, spec.seq_len, spec.seq_len)
    assert res.site_codes[blk.SITE_LN1_INPUT].shape == (spec.seq_len, spec.embed_dim)


def test_missing_site_params_rejected(toy):
    spec, w, xs, _ = toy
    params = calibrated_params(toy, 8)
    del params[blk.SITE_POST_GELU]
    with pytest.raises(PipelineError):
        quant_forward(spec, w, default_pipeline(8, 8), params, xs[0])


def test_bitwidth_monotone_end_to_end(toy):
    spec, w, xs, _ = toy
    mses = []
    for bits in (4, 6, 8, 16):
        params = calibrated_params(toy, bits)
        pipe = default_pipeline(bits, bits, mode=MODE_FAKE)
        tot = 0.0
        for i in range(4):
            fp = blk.fp_forward(spec, w, xs[i])
            res = quant_forward(spec, w, pipe, params, xs[i])
            tot += float(np.mean((res.output - fp) ** 2))
        mses.append(tot)
    assert mses == sorted(mses, reverse=True)


def test_int_guard_overflow_and_float_detection():
    guard = _IntGuard(enabled=True)
    big = np.full((2, 2), 1 << 31, dtype=np.int64)
    with pytest.raises(AccumulatorOverflowError):
        guard.matmul(big, big)
    with pytest.raises(PipelineError):
        guard.matmul(np.ones((2, 2)), np.ones((2, 2), dtype=np.int64))
    assert guard.float_violations == 1


def test_compare_schemes_report(toy):
    spec, w, xs, _ = toy
    report = compare_schemes(spec, w, xs, bits=6, num_candidates=60)
    assert set(report["sites"]) == set(COMPARE_SITES)
    for site, entry in report["sites"].items():
        for scheme in ("uniform", "twin_region", "v2sf"):
            assert "mse" in entry[scheme]
            assert len(entry[scheme]["histogram"]["counts"]) == 64
        # code-set cardinality: at most 2^(b-1) + 2^(b-1) distinct levels
        assert entry["v2sf"]["distinct_levels"] <= 32 + 32
        assert entry["lowest_mse_scheme"] in ("uniform", "twin_region", "v2sf")
    # on the toy data the codec wins the softmax site
    sm = report["sites"][blk.SITE_POST_SOFTMAX]
    assert sm["v2sf"]["mse"] < sm["uniform"]["mse"]
    assert sm["twin_region"]["region2_bins_total"] == 32
