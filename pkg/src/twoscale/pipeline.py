"""Quantized execution of the toy block and the scheme comparison report.

Two modes share all inter-matmul glue (LayerNorm internals, GeLU, residual
adds, requantization), so they differ only in how matmuls and softmax run:

- integer_path: every matmul operand is an integer code array accumulated in
  int64 (checked against overflow, never wrapped); coarse-region codec
  operands enter as level = stored << m before accumulation; softmax runs on
  integer codes end to end.
- fake_quant: each site is replaced by quantize-then-dequantize and matmuls
  run on the dequantized operands in float64 with the same accumulation
  order, which keeps requantized codes bit-identical to the integer path on
  seeded data (float32 products measurably flip rounding boundaries).

LayerNorm inputs are quantized at the site boundary and the normalization
itself stays in high precision; that boundary is the whole extent of the
"fully quantized LayerNorm" here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import block as blk
from .intsoftmax import IntSoftmaxConfig, int_softmax
from .o2sf import O2sfParams, o2sf_quantize, o2sf_dequantize
from .quant import QuantParams, mse, quantize, round_half_away, sqnr_db
from .search import SCHEME_O2SF, SCHEME_UNIFORM, SCHEME_V2SF, candidate_grid
from .v2sf import (KIND_GELU, KIND_SOFTMAX, V2sfParams, distinct_levels, twin_region_encode,
                   v2sf_decode_levels, v2sf_qdq)

MODE_FAKE = "fake_quant"
MODE_INTEGER = "integer_path"

SCHEME_TWIN_REGION = "twin_region"
COMPARE_SCHEMES = [SCHEME_UNIFORM, SCHEME_TWIN_REGION, SCHEME_V2SF]
COMPARE_SITES = [blk.SITE_POST_SOFTMAX, blk.SITE_POST_GELU]


class PipelineError(ValueError):
    pass


class AccumulatorOverflowError(ArithmeticError):
    pass


@dataclass
class SiteSpec:
    scheme: str
    bits: int
    v2sf_kind: str | None = None
    v2sf_shift: int | None = None


@dataclass
class QuantPipelineSpec:
    """Scheme assignment for every quantization site in the block."""

    sites: dict[str, SiteSpec]
    mode: str = MODE_FAKE

    def __post_init__(self):
        expected = set(blk.ACTIVATION_SITES) | set(blk.WEIGHT_SITES)
        got = set(self.sites)
        if got != expected:
            missing, extra = expected - got, got - expected
            raise PipelineError(f"site map mismatch: missing {sorted(missing)}, "
                                f"extra {sorted(extra)}")
        if self.mode not in (MODE_FAKE, MODE_INTEGER):
            raise PipelineError(f"unknown mode {self.mode!r}")
        for name in blk.WEIGHT_SITES:
            if self.sites[name].scheme != SCHEME_UNIFORM:
                raise PipelineError(f"weight site {name} must use the uniform scheme")


def default_pipeline(bits_activations: int = 8, bits_weights: int = 8,
                     mode: str = MODE_FAKE) -> QuantPipelineSpec:
    """The standard assignment: codec sites two-scaled, everything else uniform."""
    ba, bw = bits_activations, bits_weights
    sites = {name: SiteSpec(scheme=SCHEME_UNIFORM, bits=bw) for name in blk.WEIGHT_SITES}
    for name in blk.ACTIVATION_SITES:
        sites[name] = SiteSpec(scheme=SCHEME_UNIFORM, bits=ba)
    sites[blk.SITE_POST_SOFTMAX] = SiteSpec(scheme=SCHEME_V2SF, bits=ba,
                                            v2sf_kind=KIND_SOFTMAX)
    sites[blk.SITE_POST_GELU] = SiteSpec(scheme=SCHEME_V2SF, bits=ba, v2sf_kind=KIND_GELU)
    sites[blk.SITE_LN1_INPUT] = SiteSpec(scheme=SCHEME_O2SF, bits=ba)
    sites[blk.SITE_LN2_INPUT] = SiteSpec(scheme=SCHEME_O2SF, bits=ba)
    return QuantPipelineSpec(sites=sites, mode=mode)


@dataclass
class _IntGuard:
    """Instrumentation for the integer path: counts matmuls, flags float leaks."""

    enabled: bool
    matmuls: int = 0
    float_violations: int = 0

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.matmuls += 1
        if not (np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)):
            self.float_violations += 1
            raise PipelineError("non-integer operand reached an integer-path matmul")
        a64 = a.astype(np.int64)
        b64 = b.astype(np.int64)
        # Python ints: the bound itself must not wrap
        bound = (int(np.abs(a64).max(initial=0)) * int(np.abs(b64).max(initial=0))
                 * max(1, a.shape[-1]))
        if bound >= (1 << 62):
            raise AccumulatorOverflowError(
                f"integer accumulation bound 2^{math.log2(max(bound, 1)):.1f} "
                "exceeds the 64-bit budget")
        return a64 @ b64


def _requant_codes(values: np.ndarray, params: QuantParams) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(values, dtype=np.float64) / params.scale),
                   params.code_min, params.code_max).astype(np.int64)


@dataclass
class PipelineResult:
    output: np.ndarray
    mode: str
    site_report: dict[str, dict]  # per site: scheme, bits, mse, sqnr_db
    site_codes: dict[str, np.ndarray] = field(default_factory=dict)
    matmul_count: int = 0
    float_in_accumulator_violations: int = 0


def quant_forward(spec: blk.BlockSpec, weights: blk.BlockWeights,
                  pipeline: QuantPipelineSpec, site_params: dict[str, object],
                  x: np.ndarray, use_int_softmax: bool = True) -> PipelineResult:
    """Run one sample through the quantized block in the pipeline's mode.

    site_params maps every site name to its calibrated parameters
    (QuantParams / V2sfParams / O2sfParams, as produced by the search).
    """
    missing = [s for s in pipeline.sites if s not in site_params]
    if missing:
        raise PipelineError(f"calibration missing sites: {missing}")
    for name, site in pipeline.sites.items():
        params = site_params[name]
        kind = {SCHEME_UNIFORM: QuantParams, SCHEME_V2SF: V2sfParams,
                SCHEME_O2SF: O2sfParams}[site.scheme]
        if not isinstance(params, kind):
            raise PipelineError(f"site {name}: expected {kind.__name__} for "
                                f"scheme {site.scheme}")

    integer = pipeline.mode == MODE_INTEGER
    guard = _IntGuard(enabled=integer)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.seq_len, spec.embed_dim):
        raise PipelineError(f"input shape {x.shape} != {(spec.seq_len, spec.embed_dim)}")

    _, fp_sites = blk.fp_forward(spec, weights, x.astype(np.float32), capture=True)
    site_report: dict[str, dict] = {}
    site_codes: dict[str, np.ndarray] = {}

    def record(name: str, deq: np.ndarray, codes: np.ndarray) -> None:
        ref = fp_sites[name].astype(np.float64)
        site = pipeline.sites[name]
        site_report[name] = {
            "scheme": site.scheme, "bits": site.bits,
            "mse": mse(ref, deq), "sqnr_db": sqnr_db(ref, deq),
        }
        site_codes[name] = np.asarray(codes)

    def uniform_site(name: str, values: np.ndarray):
        p: QuantParams = site_params[name]
        codes = _requant_codes(values, p)
        deq = codes.astype(np.float64) * p.scale
        record(name, deq, codes)
        return codes, deq, p

    def matmul(a_codes, a_deq, a_scale, b_codes, b_deq, b_scale, extra_scale=1.0):
        """One matmul in the current mode; returns the float pre-activation."""
        if integer:
            acc = guard.matmul(a_codes, b_codes)
            return acc.astype(np.float64) * (a_scale * b_scale * extra_scale)
        return blk.ordered_matmul(a_deq, b_deq) * extra_scale

    # weights are quantized once per site
    w_codes, w_deq, w_scale = {}, {}, {}
    for name, w in weights.site_map().items():
        p: QuantParams = site_params[name]
        q = quantize(w, p)
        w_codes[name] = q.codes.astype(np.int64)
        w_deq[name] = q.codes.astype(np.float64) * p.scale
        w_scale[name] = p.scale
        ref = np.asarray(w, dtype=np.float64)
        site_report[name] = {"scheme": SCHEME_UNIFORM, "bits": p.bits,
                             "mse": mse(ref, w_deq[name]),
                             "sqnr_db": sqnr_db(ref, w_deq[name])}
        site_codes[name] = q.codes

    def o2sf_site(name: str, values: np.ndarray):
        p: O2sfParams = site_params[name]
        q = o2sf_quantize(values, p, channel_axis=-1)
        deq = o2sf_dequantize(q).astype(np.float64)
        record(name, deq, q.codes)
        return q.codes.astype(np.int64), deq, p

    def v2sf_site(name: str, values: np.ndarray):
        p: V2sfParams = site_params[name]
        levels = v2sf_decode_levels(values, p)
        deq = levels.astype(np.float64) * p.scale_small
        record(name, deq, levels)
        return levels, deq, p.scale_small

    # --- attention ---
    x_codes, x_deq, _ = o2sf_site(blk.SITE_LN1_INPUT, x)
    ln1 = blk.layernorm(x_deq)
    ln1_codes, ln1_deq, ln1_p = uniform_site(blk.SITE_LN1_OUTPUT, ln1)
    qkv_pre = matmul(ln1_codes, ln1_deq, ln1_p.scale,
                     w_codes[blk.SITE_QKV_WEIGHTS], w_deq[blk.SITE_QKV_WEIGHTS],
                     w_scale[blk.SITE_QKV_WEIGHTS])
    qkv_codes, qkv_deq, qkv_p = uniform_site(blk.SITE_QKV_OUTPUT, qkv_pre)

    d = spec.embed_dim
    inv_sqrt_hd = 1.0 / np.sqrt(spec.head_dim)
    q_c = blk.split_heads(qkv_codes[:, :d], spec)
    k_c = blk.split_heads(qkv_codes[:, d:2 * d], spec)
    v_c = blk.split_heads(qkv_codes[:, 2 * d:], spec)
    q_f = blk.split_heads(qkv_deq[:, :d], spec)
    k_f = blk.split_heads(qkv_deq[:, d:2 * d], spec)
    v_f = blk.split_heads(qkv_deq[:, 2 * d:], spec)
    logits_pre = np.stack([
        matmul(q_c[h], q_f[h], qkv_p.scale, k_c[h].T, k_f[h].T, qkv_p.scale,
               extra_scale=inv_sqrt_hd)
        for h in range(spec.num_heads)])
    logit_codes, logit_deq, logit_p = uniform_site(blk.SITE_ATTENTION_LOGITS, logits_pre)

    if integer and use_int_softmax:
        sm_cfg = IntSoftmaxConfig(scale_in=logit_p.scale, bits_in=logit_p.bits)
        prob_codes, prob_scale = int_softmax(logit_codes, sm_cfg, axis=-1)
        probs = prob_codes.astype(np.float64) * prob_scale
    else:
        probs = blk.softmax(logit_deq, axis=-1)
    a_levels, a_deq, a_scale = v2sf_site(blk.SITE_POST_SOFTMAX, probs)

    attn_pre = blk.merge_heads(np.stack([
        matmul(a_levels[h], a_deq[h], a_scale, v_c[h], v_f[h], qkv_p.scale)
        for h in range(spec.num_heads)]))
    attn_codes, attn_deq, attn_p = uniform_site(blk.SITE_ATTN_OUTPUT, attn_pre)

    proj_pre = matmul(attn_codes, attn_deq, attn_p.scale,
                      w_codes[blk.SITE_PROJ_WEIGHTS], w_deq[blk.SITE_PROJ_WEIGHTS],
                      w_scale[blk.SITE_PROJ_WEIGHTS])
    r1 = x_deq + proj_pre

    # --- MLP ---
    r1_codes, r1_deq, _ = o2sf_site(blk.SITE_LN2_INPUT, r1)
    ln2 = blk.layernorm(r1_deq)
    ln2_codes, ln2_deq, ln2_p = uniform_site(blk.SITE_LN2_OUTPUT, ln2)
    f1_pre = matmul(ln2_codes, ln2_deq, ln2_p.scale,
                    w_codes[blk.SITE_FC1_WEIGHTS], w_deq[blk.SITE_FC1_WEIGHTS],
                    w_scale[blk.SITE_FC1_WEIGHTS])
    g = blk.gelu(f1_pre)
    g_levels, g_deq, g_scale = v2sf_site(blk.SITE_POST_GELU, g)
    f2_pre = matmul(g_levels, g_deq, g_scale,
                    w_codes[blk.SITE_FC2_WEIGHTS], w_deq[blk.SITE_FC2_WEIGHTS],
                    w_scale[blk.SITE_FC2_WEIGHTS])
    out = r1_deq + f2_pre

    return PipelineResult(output=out.astype(np.float32), mode=pipeline.mode,
                          site_report=site_report, site_codes=site_codes,
                          matmul_count=guard.matmuls,
                          float_in_accumulator_violations=guard.float_violations)


# ---------------------------------------------------------------------------
# Scheme comparison (uniform vs fixed twin-region vs two-scaled codec)
# ---------------------------------------------------------------------------

def _best_scale(values: np.ndarray, grid: np.ndarray, qdq) -> tuple[float, float]:
    best_s, best_e = None, None
    for s in grid:
        e = mse(values, qdq(values, float(s)))
        if best_e is None or e < best_e:
            best_s, best_e = float(s), e
    return best_s, best_e


def _histogram(decoded: np.ndarray, bins: int = 64) -> dict:
    lo = float(min(0.0, decoded.min()))
    hi = float(decoded.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(decoded, bins=bins, range=(lo, hi))
    return {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def compare_schemes(spec: blk.BlockSpec, weights: blk.BlockWeights, xs: np.ndarray,
                    bits: int, num_candidates: int = 100, space_factor: float = 1.2
                    ) -> dict:
    """Per-site MSE and histogram data for each scheme at the two codec sites.

    Scales are per-tensor plain-MSE optima over the standard candidate grid;
    the twin-region softmax scale stays pinned at 1/2^(b-1) by definition (its
    whole pathology), while its GeLU coarse scale is swept like the others.
    """
    bundle = blk.capture_calibration(spec, weights, xs)
    report: dict = {"bits": bits, "sites": {}}
    for site in COMPARE_SITES:
        values = np.asarray(bundle[f"{blk.DEFAULT_PREFIX}.{site}"], dtype=np.float64)
        kind = KIND_SOFTMAX if site == blk.SITE_POST_SOFTMAX else KIND_GELU
        shift = {KIND_SOFTMAX: 4, KIND_GELU: 3}[kind]
        absmax = float(np.abs(values).max())
        entry: dict = {}

        s, e = _best_scale(values, candidate_grid(absmax, bits, num_candidates,
                                                  space_factor),
                           lambda v, c: np.clip(
                               round_half_away(v / c), -(1 << (bits - 1)),
                               (1 << (bits - 1)) - 1) * c)
        uniform_deq = (np.clip(round_half_away(values / s), -(1 << (bits - 1)),
                               (1 << (bits - 1)) - 1) * s)
        entry[SCHEME_UNIFORM] = {"scale": s, "mse": e,
                                 "histogram": _histogram(uniform_deq),
                                 "distinct_levels": int(np.unique(uniform_deq).size)}

        if kind == KIND_SOFTMAX:
            tr = twin_region_encode(values, kind, bits, shift)
            tr_deq = tr.decode().astype(np.float64)
            tr_mse = mse(values, tr_deq)
        else:
            grid = candidate_grid(absmax, bits, num_candidates, space_factor)
            best = None
            for c in grid:
                enc = twin_region_encode(values, kind, bits, shift, scale_r2=float(c))
                e2 = mse(values, enc.decode().astype(np.float64))
                if best is None or e2 < best[1]:
                    best = (enc, e2)
            tr, tr_mse = best
            tr_deq = tr.decode().astype(np.float64)
        occupied, total = tr.region2_bin_occupancy()
        entry[SCHEME_TWIN_REGION] = {
            "scale_r1": tr.scale_r1, "scale_r2": tr.scale_r2, "mse": tr_mse,
            "histogram": _histogram(tr_deq),
            "distinct_levels": int(np.unique(tr_deq).size),
            "region2_bins_occupied": occupied, "region2_bins_total": total,
            "region2_bins_empty_fraction": 1.0 - occupied / total,
        }

        ext_bits = (bits - 1) + shift
        s, e = _best_scale(values, candidate_grid(absmax, ext_bits + 1, num_candidates,
                                                  space_factor),
                           lambda v, c: v2sf_qdq(v, V2sfParams(
                               kind=kind, bits=bits, shift=shift, scale_small=c)))
        params = V2sfParams(kind=kind, bits=bits, shift=shift, scale_small=s)
        levels = v2sf_decode_levels(values, params)
        codec_deq = levels.astype(np.float64) * s
        all_levels = distinct_levels(params)
        used = np.unique(levels)
        entry[SCHEME_V2SF] = {
            "scale_small": s, "shift": shift, "mse": e,
            "histogram": _histogram(codec_deq),
            "distinct_levels": int(used.size),
            "levels_total": int(all_levels.size),
            "levels_unused_fraction": 1.0 - float(
                np.isin(all_levels, used).sum()) / all_levels.size,
        }

        entry["lowest_mse_scheme"] = min(
            ((name, entry[name]["mse"]) for name in COMPARE_SCHEMES),
            key=lambda kv: kv[1])[0]
        report["sites"][site] = entry
    return report
