"""Whole-model calibration: runs the alternating search layer by layer.

The toy block decomposes into nine searches in forward (topological) order.
Four pair a weight matrix with the activation feeding it (the LayerNorm-input
sites co-optimize with the consuming projection, the post-GeLU codec scale
with the second MLP matrix); the remaining requantization sites are searched
activation-only against an identity evaluator, i.e. the metric is taken at the
quantizer's own output.
"""

from __future__ import annotations

import numpy as np

from . import block as blk
from .pipeline import QuantPipelineSpec, default_pipeline
from .search import (METRIC_GRAD, SCHEME_O2SF, SCHEME_UNIFORM, SCHEME_V2SF,
                     CalibrationResult, SearchConfig, SearchError, search_layer)
from .tensor import TensorBundle

EVAL_IDENTITY = "identity"
EVAL_MATMUL = "matmul"
EVAL_LN_MATMUL = "ln_matmul"

# (layer name, weight site or None, activation site, evaluator, gradient anchor)
LAYER_PLAN = [
    ("attn_qkv", blk.SITE_QKV_WEIGHTS, blk.SITE_LN1_INPUT, EVAL_LN_MATMUL,
     blk.SITE_QKV_OUTPUT),
    ("ln1_output", None, blk.SITE_LN1_OUTPUT, EVAL_IDENTITY, blk.SITE_LN1_OUTPUT),
    ("qkv_output", None, blk.SITE_QKV_OUTPUT, EVAL_IDENTITY, blk.SITE_QKV_OUTPUT),
    ("attention_logits", None, blk.SITE_ATTENTION_LOGITS, EVAL_IDENTITY,
     blk.SITE_ATTENTION_LOGITS),
    ("post_softmax", None, blk.SITE_POST_SOFTMAX, EVAL_IDENTITY, blk.SITE_POST_SOFTMAX),
    ("attn_proj", blk.SITE_PROJ_WEIGHTS, blk.SITE_ATTN_OUTPUT, EVAL_MATMUL,
     blk.CAPTURE_ATTN_PROJ_OUTPUT),
    ("mlp_fc1", blk.SITE_FC1_WEIGHTS, blk.SITE_LN2_INPUT, EVAL_LN_MATMUL,
     blk.CAPTURE_FC1_OUTPUT),
    ("ln2_output", None, blk.SITE_LN2_OUTPUT, EVAL_IDENTITY, blk.SITE_LN2_OUTPUT),
    ("mlp_fc2", blk.SITE_FC2_WEIGHTS, blk.SITE_POST_GELU, EVAL_MATMUL,
     blk.CAPTURE_FC2_OUTPUT),
]


def _evaluator(kind: str):
    if kind == EVAL_IDENTITY:
        return lambda w, a: a
    if kind == EVAL_MATMUL:
        return lambda w, a: blk.ordered_matmul(
            np.asarray(a, dtype=np.float64).reshape(-1, np.asarray(a).shape[-1]), w)
    if kind == EVAL_LN_MATMUL:
        return lambda w, a: blk.ordered_matmul(
            blk.layernorm(np.asarray(a, dtype=np.float64).reshape(
                -1, np.asarray(a).shape[-1])), w)
    raise SearchError(f"unknown evaluator kind {kind!r}")


def _layer_grad(bundle: TensorBundle, cfg: SearchConfig, prefix: str, anchor: str,
                eval_kind: str):
    name = f"{prefix}.{anchor}.grad"
    grad = bundle.get(name)
    if grad is None:
        return None
    grad = np.asarray(grad, dtype=np.float64)
    if eval_kind in (EVAL_MATMUL, EVAL_LN_MATMUL):
        grad = grad.reshape(-1, grad.shape[-1])
    return grad


def required_gradient_names(cfg: SearchConfig, prefix: str = blk.DEFAULT_PREFIX
                            ) -> list[str]:
    if cfg.metric != METRIC_GRAD:
        return []
    return [f"{prefix}.{anchor}.grad" for _, _, _, _, anchor in LAYER_PLAN]


def calibrate_model(bundle: TensorBundle, spec: blk.BlockSpec, weights: blk.BlockWeights,
                    cfg: SearchConfig, pipeline: QuantPipelineSpec | None = None,
                    prefix: str = blk.DEFAULT_PREFIX) -> CalibrationResult:
    """Search every layer of the toy block against its captured calibration tensors."""
    pipeline = pipeline if pipeline is not None else default_pipeline(
        cfg.bits_activations, cfg.bits_weights)
    missing = [f"{prefix}.{site}" for _, _, site, _, _ in LAYER_PLAN
               if f"{prefix}.{site}" not in bundle]
    if missing:
        raise SearchError(f"bundle is missing calibration tensors: {missing}")
    missing_grads = [n for n in required_gradient_names(cfg, prefix) if n not in bundle]
    if missing_grads:
        raise SearchError(f"grad_weighted metric requires gradients, missing: "
                          f"{missing_grads}")

    weight_map = weights.site_map()
    layers = {}
    for name, weight_site, act_site, eval_kind, anchor in LAYER_PLAN:
        site = pipeline.sites[act_site]
        acts = bundle[f"{prefix}.{act_site}"]
        layers[name] = search_layer(
            _evaluator(eval_kind),
            weight_map[weight_site] if weight_site else None,
            acts,
            cfg,
            site.scheme,
            name=name,
            v2sf_kind=site.v2sf_kind,
            v2sf_shift=site.v2sf_shift,
            grad=_layer_grad(bundle, cfg, prefix, anchor, eval_kind),
            weight_site=weight_site,
            activation_site=act_site,
        )
    return CalibrationResult(config=cfg, layers=layers, seed=cfg.seed)


def _scheme_for_site_name(name: str) -> tuple[str, str | None]:
    suffix = name.rsplit(".", 1)[-1]
    if suffix == blk.SITE_POST_SOFTMAX:
        return SCHEME_V2SF, "softmax"
    if suffix == blk.SITE_POST_GELU:
        return SCHEME_V2SF, "gelu"
    if suffix in (blk.SITE_LN1_INPUT, blk.SITE_LN2_INPUT):
        return SCHEME_O2SF, None
    return SCHEME_UNIFORM, None


def calibrate_bundle_sites(bundle: TensorBundle, cfg: SearchConfig) -> CalibrationResult:
    """Activation-only calibration of every tensor in an exported bundle.

    Sites are recognized by their name suffix (post_softmax / post_gelu get the
    codec, LayerNorm inputs the outlier-aware scheme, the rest uniform); this
    is the real-data path fed by exported activation bundles.
    """
    names = [n for n in bundle.names() if not n.endswith(".grad")]
    if not names:
        raise SearchError("bundle holds no activation tensors")
    if cfg.metric == METRIC_GRAD:
        missing = [n + ".grad" for n in names if n + ".grad" not in bundle]
        if missing:
            raise SearchError(f"grad_weighted metric requires gradients, missing: "
                              f"{missing}")
    layers = {}
    for name in names:
        scheme, v2sf_kind = _scheme_for_site_name(name)
        grad = bundle.get(name + ".grad")
        layers[name] = search_layer(
            _evaluator(EVAL_IDENTITY), None, bundle[name], cfg, scheme,
            name=name, v2sf_kind=v2sf_kind,
            grad=None if grad is None else np.asarray(grad, dtype=np.float64),
            weight_site=None, activation_site=name)
    return CalibrationResult(config=cfg, layers=layers, seed=cfg.seed)
