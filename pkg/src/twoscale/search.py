"""Alternating calibration search over scale-candidate grids.

Each layer alternates for a fixed number of rounds between sweeping the weight
scale and sweeping the activation parameters, keeping the argmin of a
gradient-weighted output-distortion metric (plain MSE when no gradients are
supplied). Candidate grids are N linear steps in (0, space_factor*max/2^(b-1)],
zero excluded. For the outlier-aware scheme the two class scales are swept
independently on their own grids until the last round, where the normal-scale
candidates are redefined to exact halvings of the chosen outlier scale so the
emitted pair is always shift-aligned.

Everything is deterministic: sweeps are pure, ties break toward the smaller
scale, parameters start at the top of their grids, and the result file is a
canonical key-sorted JSON document with scales as exact hex float literals.
Candidate metric evaluations may fan out over a thread pool (TWOSCALE_THREADS);
the reduction is an index-ordered argmin, so parallel and serial runs agree.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .o2sf import (O2sfParams, detect_outlier_channels, pack_mask, shift_candidates,
                   unpack_mask)
from .quant import QuantParams, quantize_dequantize, round_half_away
from .v2sf import DEFAULT_SHIFT, V2sfParams, v2sf_qdq

log = logging.getLogger(__name__)

CALIBRATION_FORMAT_VERSION = 1

SCHEME_UNIFORM = "uniform"
SCHEME_V2SF = "v2sf"
SCHEME_O2SF = "o2sf"

METRIC_PLAIN = "plain_mse"
METRIC_GRAD = "grad_weighted"

THREADS_ENV_VAR = "TWOSCALE_THREADS"


class SearchError(ValueError):
    pass


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV_VAR, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SearchConfig:
    rounds: int = 3
    num_candidates: int = 100  # N
    max_shift: int = 6  # N': bound of the final halving sweep
    space_factor: float = 1.2
    bits_weights: int = 8
    bits_activations: int = 8
    metric: str = METRIC_PLAIN
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise SearchError("rounds must be >= 1")
        if self.num_candidates < 2:
            raise SearchError("num_candidates must be >= 2")
        if self.max_shift < 0:
            raise SearchError("max_shift must be >= 0")
        if not self.space_factor > 0:
            raise SearchError("space_factor must be positive")
        if self.metric not in (METRIC_PLAIN, METRIC_GRAD):
            raise SearchError(f"unknown metric {self.metric!r}")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "num_candidates": self.num_candidates,
            "max_shift": self.max_shift,
            "space_factor": self.space_factor,
            "bits_weights": self.bits_weights,
            "bits_activations": self.bits_activations,
            "metric": self.metric,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class MetricInput:
    fp_output: np.ndarray
    quant_output: np.ndarray
    grad: np.ndarray | None = None


_warned_zero_grad = False


def hessian_metric(m: MetricInput, kind: str = METRIC_GRAD) -> float:
    """Sum of (grad^2)-weighted squared output error; unweighted when grads absent.

    An all-zero gradient makes the weighted metric identically zero for every
    candidate (documented degenerate); it is reported once via a warning.
    """
    fp = np.asarray(m.fp_output, dtype=np.float64)
    q = np.asarray(m.quant_output, dtype=np.float64)
    if fp.shape != q.shape:
        raise SearchError(f"shape mismatch {fp.shape} vs {q.shape}")
    err2 = (fp - q) ** 2
    if kind == METRIC_GRAD and m.grad is not None:
        g = np.asarray(m.grad, dtype=np.float64)
        if g.shape != fp.shape:
            raise SearchError(f"grad shape {g.shape} != output shape {fp.shape}")
        global _warned_zero_grad
        if not _warned_zero_grad and g.size and not np.any(g):
            log.warning("all-zero gradient: weighted metric degenerates to 0 everywhere")
            _warned_zero_grad = True
        return float(np.sum(g * g * err2))
    if kind == METRIC_GRAD and m.grad is None:
        raise SearchError("grad_weighted metric requires a gradient tensor")
    return float(np.sum(err2))


def candidate_grid(max_val: float, bits: int, n: int, space_factor: float) -> np.ndarray:
    """N linear steps in (0, space_factor*max_val/2^(bits-1)], zero excluded.

    A zero max degenerates to the single candidate {1} so downstream division
    stays total.
    """
    if max_val < 0:
        raise SearchError("max_val must be non-negative")
    if max_val == 0:
        return np.array([1.0])
    upper = space_factor * max_val / (1 << (bits - 1))
    # i/n first, so the top candidate is exactly the upper bound
    return upper * (np.arange(1, n + 1, dtype=np.float64) / n)


@dataclass
class LayerCalibration:
    name: str
    scheme: str
    weight_site: str | None
    weight_scale: float | None
    weight_bits: int | None
    activation_site: str
    activation: object  # QuantParams | V2sfParams | O2sfParams
    metric_value: float
    round_metrics: list[float] = field(default_factory=list)


def _o2sf_qdq_free(t, mask, s_o, s_n, bits, axis):
    """Dual-scale round trip without the shift-aligned constraint (mid-search)."""
    t = np.asarray(t, dtype=np.float64)
    shape = [1] * t.ndim
    shape[axis % t.ndim] = mask.size
    scales = np.where(mask, s_o, s_n).reshape(shape)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return (np.clip(round_half_away(t / scales), lo, hi) * scales).astype(np.float32)


def _metric_values(cands, fn, threads: int) -> list[float]:
    if threads > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, cands))
    return [fn(c) for c in cands]


def _sweep(cands, fn, threads: int):
    """Argmin over candidates; non-finite metrics are discarded; ties take the
    smaller (earlier) candidate so evaluation order cannot change the result."""
    values = _metric_values(list(cands), fn, threads)
    best_c, best_m = None, None
    for c, m in zip(cands, values):
        if not math.isfinite(m):
            continue
        if best_m is None or m < best_m:
            best_c, best_m = c, m
    if best_c is None:
        raise SearchError("all candidates discarded (non-finite metric)")
    return best_c, best_m


def search_layer(evaluator, weights, acts, cfg: SearchConfig, scheme: str, *,
                 name: str = "layer", v2sf_kind: str | None = None,
                 v2sf_shift: int | None = None, channel_axis: int = -1,
                 grad: np.ndarray | None = None, weight_site: str | None = None,
                 activation_site: str = "", threads: int | None = None
                 ) -> LayerCalibration:
    """Alternate weight-scale and activation-parameter sweeps for cfg.rounds rounds.

    evaluator(weights_or_None, acts) must be a deterministic map to the layer
    output; the identity works for activation-only sites. For scheme "o2sf" the
    channel partition is fixed up front from the per-channel absolute maxima,
    then s_o and s_n are swept on their own grids, except that the last round
    sweeps s_n over exact halvings of the current s_o.
    """
    threads = default_threads() if threads is None else threads
    acts = np.asarray(acts)
    fp_out = np.asarray(evaluator(weights, acts), dtype=np.float64)
    metric_kind = cfg.metric
    if metric_kind == METRIC_GRAD and grad is None:
        raise SearchError(f"{name}: grad_weighted metric requires a gradient for the output")

    def measure(w_qdq, a_qdq) -> float:
        out = np.asarray(evaluator(w_qdq, a_qdq), dtype=np.float64)
        return hessian_metric(MetricInput(fp_out, out, grad), metric_kind)

    ba = cfg.bits_activations
    if weights is not None:
        w_grid = candidate_grid(float(np.abs(weights).max()), cfg.bits_weights,
                                cfg.num_candidates, cfg.space_factor)
        w_scale = float(w_grid[-1])
    else:
        w_grid, w_scale = None, None

    def w_qdq():
        if weights is None:
            return None
        return quantize_dequantize(weights, QuantParams(scale=w_scale, bits=cfg.bits_weights))

    if scheme == SCHEME_UNIFORM:
        a_grid = candidate_grid(float(np.abs(acts).max()), ba,
                                cfg.num_candidates, cfg.space_factor)
        a_scale = float(a_grid[-1])

        def a_qdq(scale):
            return quantize_dequantize(acts, QuantParams(scale=scale, bits=ba))

    elif scheme == SCHEME_V2SF:
        if v2sf_kind is None:
            raise SearchError("scheme v2sf needs v2sf_kind (softmax|gelu)")
        shift = DEFAULT_SHIFT[v2sf_kind] if v2sf_shift is None else v2sf_shift
        # the swept scale is the fine one, so the grid divides by the extended range
        ext_bits = (ba - 1) + shift
        a_grid = candidate_grid(float(np.abs(acts).max()), ext_bits + 1,
                                cfg.num_candidates, cfg.space_factor)
        a_scale = float(a_grid[-1])

        def a_qdq(scale):
            return v2sf_qdq(acts, V2sfParams(kind=v2sf_kind, bits=ba, shift=shift,
                                             scale_small=scale))

    elif scheme == SCHEME_O2SF:
        axis = channel_axis % acts.ndim
        chan_abs = np.abs(acts).max(axis=tuple(i for i in range(acts.ndim) if i != axis))
        partition = detect_outlier_channels(chan_abs)
        mask = partition.mask(acts.shape[axis])
        moved = np.moveaxis(np.abs(acts), axis, -1)
        out_max = float(moved[..., mask].max()) if mask.any() else 0.0
        nrm_max = float(moved[..., ~mask].max()) if (~mask).any() else 0.0
        o_grid = candidate_grid(out_max, ba, cfg.num_candidates, cfg.space_factor)
        n_grid = candidate_grid(nrm_max, ba, cfg.num_candidates, cfg.space_factor)
        s_o, s_n = float(o_grid[-1]), float(n_grid[-1])
    else:
        raise SearchError(f"unknown scheme {scheme!r}")

    round_metrics: list[float] = []
    best_metric = math.inf
    final_shift = 0

    for r in range(cfg.rounds):
        last_round = r == cfg.rounds - 1
        if weights is not None:
            if scheme == SCHEME_O2SF:
                a_fixed = _o2sf_qdq_free(acts, mask, s_o, s_n, ba, channel_axis)
            else:
                a_fixed = a_qdq(a_scale)
            w_scale, best_metric = _sweep(
                w_grid,
                lambda c: measure(quantize_dequantize(
                    weights, QuantParams(scale=float(c), bits=cfg.bits_weights)), a_fixed),
                threads)
            w_scale = float(w_scale)
        if scheme == SCHEME_O2SF:
            w_fixed = w_qdq()
            s_o, best_metric = _sweep(
                o_grid,
                lambda c: measure(w_fixed, _o2sf_qdq_free(
                    acts, mask, float(c), s_n, ba, channel_axis)),
                threads)
            s_o = float(s_o)
            n_cands = shift_candidates(s_o, cfg.max_shift) if last_round else n_grid
            s_n, best_metric = _sweep(
                n_cands,
                lambda c: measure(w_fixed, _o2sf_qdq_free(
                    acts, mask, s_o, float(c), ba, channel_axis)),
                threads)
            s_n = float(s_n)
            if last_round:
                final_shift = shift_candidates(s_o, cfg.max_shift).index(s_n)
        else:
            w_fixed = w_qdq()
            a_scale, best_metric = _sweep(
                a_grid, lambda c: measure(w_fixed, a_qdq(float(c))), threads)
            a_scale = float(a_scale)
        round_metrics.append(best_metric)

    if scheme == SCHEME_UNIFORM:
        activation = QuantParams(scale=a_scale, bits=ba)
    elif scheme == SCHEME_V2SF:
        activation = V2sfParams(kind=v2sf_kind, bits=ba, shift=shift, scale_small=a_scale)
    else:
        activation = O2sfParams(outlier_mask=mask, scale_outlier=s_o,
                                shift=final_shift, bits=ba)
    return LayerCalibration(
        name=name, scheme=scheme, weight_site=weight_site, weight_scale=w_scale,
        weight_bits=cfg.bits_weights if weights is not None else None,
        activation_site=activation_site, activation=activation,
        metric_value=best_metric, round_metrics=round_metrics)


# ---------------------------------------------------------------------------
# Calibration result document
# ---------------------------------------------------------------------------

def _activation_to_dict(params, channel_axis: int = -1) -> dict:
    if isinstance(params, QuantParams):
        return {"kind": SCHEME_UNIFORM, "bits": params.bits,
                "scale_hex": float(params.scale).hex(), "scale": params.scale}
    if isinstance(params, V2sfParams):
        return {"kind": SCHEME_V2SF, "variant": params.kind, "bits": params.bits,
                "shift": params.shift, "scale_small_hex": float(params.scale_small).hex(),
                "scale_small": params.scale_small}
    if isinstance(params, O2sfParams):
        return {"kind": SCHEME_O2SF, "bits": params.bits, "shift": params.shift,
                "scale_outlier_hex": float(params.scale_outlier).hex(),
                "scale_outlier": params.scale_outlier,
                "scale_normal_hex": float(params.scale_normal).hex(),
                "channels": params.channels, "channel_axis": channel_axis,
                "outlier_mask_b64": base64.b64encode(
                    pack_mask(params.outlier_mask)).decode("ascii")}
    raise SearchError(f"unknown activation params {type(params)!r}")


def _activation_from_dict(d: dict):
    kind = d["kind"]
    if kind == SCHEME_UNIFORM:
        return QuantParams(scale=float.fromhex(d["scale_hex"]), bits=d["bits"])
    if kind == SCHEME_V2SF:
        return V2sfParams(kind=d["variant"], bits=d["bits"], shift=d["shift"],
                          scale_small=float.fromhex(d["scale_small_hex"]))
    if kind == SCHEME_O2SF:
        mask = unpack_mask(base64.b64decode(d["outlier_mask_b64"]), d["channels"])
        return O2sfParams(outlier_mask=mask,
                          scale_outlier=float.fromhex(d["scale_outlier_hex"]),
                          shift=d["shift"], bits=d["bits"])
    raise SearchError(f"unknown activation kind {kind!r}")


@dataclass
class CalibrationResult:
    config: SearchConfig
    layers: dict[str, LayerCalibration]
    seed: int = 0

    def site_params(self) -> dict[str, object]:
        """Flat site-name -> params map (weight sites become QuantParams)."""
        out: dict[str, object] = {}
        for layer in self.layers.values():
            if layer.weight_site is not None:
                out[layer.weight_site] = QuantParams(scale=layer.weight_scale,
                                                     bits=layer.weight_bits)
            out[layer.activation_site] = layer.activation
        return out

    def to_json_text(self) -> str:
        doc = {
            "format_version": CALIBRATION_FORMAT_VERSION,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "layers": {
                name: {
                    "scheme": lc.scheme,
                    "weight_site": lc.weight_site,
                    "weight_scale_hex": (None if lc.weight_scale is None
                                         else float(lc.weight_scale).hex()),
                    "weight_scale": lc.weight_scale,
                    "weight_bits": lc.weight_bits,
                    "activation_site": lc.activation_site,
                    "activation": _activation_to_dict(lc.activation),
                    "metric_value": lc.metric_value,
                    "round_metrics": lc.round_metrics,
                }
                for name, lc in self.layers.items()
            },
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json_text())

    @classmethod
    def from_json_text(cls, text: str) -> "CalibrationResult":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != CALIBRATION_FORMAT_VERSION:
            raise SearchError(
                f"calibration format version {version!r} != {CALIBRATION_FORMAT_VERSION}")
        layers = {}
        for name, d in doc["layers"].items():
            layers[name] = LayerCalibration(
                name=name, scheme=d["scheme"], weight_site=d["weight_site"],
                weight_scale=(None if d["weight_scale_hex"] is None
                              else float.fromhex(d["weight_scale_hex"])),
                weight_bits=d["weight_bits"], activation_site=d["activation_site"],
                activation=_activation_from_dict(d["activation"]),
                metric_value=d["metric_value"], round_metrics=list(d["round_metrics"]))
        return cls(config=SearchConfig.from_dict(doc["config"]), layers=layers,
                   seed=doc["seed"])

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        return cls.from_json_text(Path(path).read_text())
