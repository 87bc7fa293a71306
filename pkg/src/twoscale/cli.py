"""Command-line surface: calibrate, quantize, eval, compare.

Every run echoes its merged effective configuration next to its outputs, and
all outputs are byte-deterministic under a fixed seed (no timestamps). Exit
codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import block as blk
from .calibrate import calibrate_bundle_sites, calibrate_model
from .intsoftmax import IntSoftmaxConfig, max_relative_exp_error
from .o2sf import CHANNEL_SHIFT_BITS_PER_CHANNEL, O2SF_MASK_BITS_PER_CHANNEL
from .pipeline import (MODE_FAKE, MODE_INTEGER, compare_schemes, default_pipeline,
                       quant_forward)
from .o2sf import o2sf_quantize
from .quant import quantize
from .search import (METRIC_GRAD, METRIC_PLAIN, THREADS_ENV_VAR, CalibrationResult,
                     SearchConfig)
from .tensor import TensorBundle, save_tensor
from .v2sf import V2sfParams, save_v2sf, v2sf_encode

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_SAMPLES = 32

EPILOG = f"""\
report schemas:
  eval report.csv      columns: site,scheme,bits,mse,sqnr_db
  compare histograms   columns: bin_left,bin_right,count (one file per site x scheme)
  compare summary.csv  columns: site,scheme,mse,lowest_mse

environment:
  {THREADS_ENV_VAR}    default worker count for candidate sweeps (default 1);
                      parallel and serial sweeps produce identical results.
"""


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # 'inf' / '-inf' / 'nan' as strings
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_json_safe(doc), sort_keys=True, indent=2) + "\n")


def _load_config_file(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _merge_config(args, file_cfg: dict) -> tuple[SearchConfig, int]:
    """defaults < config file < explicit flags."""
    merged = {
        "rounds": 3, "num_candidates": 100, "max_shift": 6, "space_factor": 1.2,
        "bits_weights": 8, "bits_activations": 8, "metric": METRIC_PLAIN, "seed": 0,
        "samples": DEFAULT_SAMPLES,
    }
    for key in list(merged):
        if key in file_cfg:
            merged[key] = file_cfg[key]
    flag_map = {
        "rounds": args.rounds, "num_candidates": args.candidates,
        "max_shift": args.max_shift, "space_factor": args.space_factor,
        "bits_weights": args.bits_weights, "bits_activations": args.bits,
        "metric": args.metric, "seed": args.seed,
        "samples": getattr(args, "samples", None),
    }
    for key, val in flag_map.items():
        if val is not None:
            merged[key] = val
    samples = int(merged.pop("samples"))
    return SearchConfig(**merged), samples


def _add_common(p: argparse.ArgumentParser, with_samples: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--bits", type=int, default=None, help="activation bit-width (default 8)")
    p.add_argument("--bits-weights", type=int, default=None,
                   help="weight bit-width (default 8)")
    p.add_argument("--metric", choices=[METRIC_PLAIN, METRIC_GRAD], default=None)
    p.add_argument("--rounds", type=int, default=None, help="search rounds (default 3)")
    p.add_argument("--candidates", type=int, default=None,
                   help="scale candidates per sweep (default 100)")
    p.add_argument("--max-shift", type=int, default=None,
                   help="bound of the final halving sweep (default 6)")
    p.add_argument("--space-factor", type=float, default=None,
                   help="grid upper bound factor (default 1.2)")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    if with_samples:
        p.add_argument("--samples", type=int, default=None,
                       help=f"calibration sample count (default {DEFAULT_SAMPLES})")
    p.add_argument("--out", default="out", help="output directory (default ./out)")


def _toy_model():
    spec = blk.BlockSpec()
    return spec, blk.init_weights(spec)


def _echo_config(out: Path, cfg: SearchConfig, samples: int, extra: dict | None = None
                 ) -> None:
    doc = {"config": cfg.to_dict(), "samples": samples}
    doc.update(extra or {})
    _write_json(out / "effective_config.json", doc)


def cmd_calibrate(args) -> int:
    cfg, samples = _merge_config(args, _load_config_file(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        spec, weights = _toy_model()
        xs = blk.sample_inputs(spec, samples, cfg.seed)
        bundle = blk.capture_calibration(spec, weights, xs)
        if cfg.metric == METRIC_GRAD:
            blk.synthetic_gradients(bundle, cfg.seed + 1)
        result = calibrate_model(bundle, spec, weights, cfg)
        blk.save_weights(spec, weights, out / "weights")
        _echo_config(out, cfg, samples, {"source": "synthetic",
                                         "block": spec.to_dict()})
    else:
        bundle = TensorBundle.load_dir(args.bundle)
        result = calibrate_bundle_sites(bundle, cfg)
        _echo_config(out, cfg, samples, {"source": str(args.bundle)})
    result.save(out / "calibration.json")
    print(f"calibration written: {out / 'calibration.json'} "
          f"({len(result.layers)} layers)")
    return EXIT_OK


def cmd_quantize(args) -> int:
    result = CalibrationResult.load(args.calibration)
    bundle = TensorBundle.load_dir(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = result.site_params()
    files, skipped = {}, []
    for name in bundle.names():
        if name.endswith(".grad"):
            continue
        site_params = params.get(name)
        if site_params is None and "." in name:
            site_params = params.get(name.split(".", 1)[1])
        if site_params is None:
            skipped.append(name)
            continue
        if isinstance(site_params, V2sfParams):
            fname = name + ".v2sf"
            save_v2sf(v2sf_encode(bundle[name], site_params), out / fname)
        else:
            fname = name + ".codes.npy"
            if hasattr(site_params, "scale"):  # uniform
                codes = quantize(bundle[name], site_params).codes
            else:  # o2sf
                codes = o2sf_quantize(bundle[name], site_params).codes
            save_tensor(codes.astype(np.float32), out / fname)
        files[name] = fname
    _write_json(out / "manifest.json", {"kind": "quantized_bundle", "files": files,
                                        "skipped": skipped,
                                        "calibration": str(args.calibration)})
    print(f"quantized {len(files)} tensors to {out} ({len(skipped)} skipped)")
    return EXIT_OK


def _eval_toy(cfg: SearchConfig, samples: int, mode: str):
    spec, weights = _toy_model()
    xs = blk.sample_inputs(spec, samples, cfg.seed)
    bundle = blk.capture_calibration(spec, weights, xs)
    if cfg.metric == METRIC_GRAD:
        blk.synthetic_gradients(bundle, cfg.seed + 1)
    pipeline = default_pipeline(cfg.bits_activations, cfg.bits_weights, mode=mode)
    calib = calibrate_model(bundle, spec, weights, cfg, pipeline)
    return spec, weights, xs, pipeline, calib


def _aggregate_eval(spec, weights, xs, pipeline, calib):
    params = calib.site_params()
    agg: dict[str, dict] = {}
    violations = 0
    matmuls = 0
    for i in range(xs.shape[0]):
        res = quant_forward(spec, weights, pipeline, params, xs[i])
        violations += res.float_in_accumulator_violations
        matmuls += res.matmul_count
        _, fp_sites = blk.fp_forward(spec, weights, xs[i], capture=True)
        for site, entry in res.site_report.items():
            a = agg.setdefault(site, {"scheme": entry["scheme"], "bits": entry["bits"],
                                      "sum_sq_err": 0.0, "sum_signal": 0.0, "count": 0})
            ref = np.asarray(fp_sites.get(site, weights.site_map().get(site)),
                             dtype=np.float64)
            a["sum_signal"] += float(np.sum(ref * ref))
            a["sum_sq_err"] += entry["mse"] * ref.size
            a["count"] += ref.size
    sites = {}
    for site, a in sorted(agg.items()):
        err = a["sum_sq_err"]
        sqnr = math.inf if err == 0 else 10.0 * math.log10(a["sum_signal"] / err)
        sites[site] = {"scheme": a["scheme"], "bits": a["bits"],
                       "mse": err / a["count"], "sqnr_db": sqnr}
    return sites, violations, matmuls


def cmd_eval(args) -> int:
    cfg, samples = _merge_config(args, _load_config_file(args.config))
    mode = args.mode
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.calibration:
        calib = CalibrationResult.load(args.calibration)
        cfg = calib.config
        spec, weights = _toy_model()
        xs = blk.sample_inputs(spec, samples, cfg.seed)
        pipeline = default_pipeline(cfg.bits_activations, cfg.bits_weights, mode=mode)
    else:
        spec, weights, xs, pipeline, calib = _eval_toy(cfg, samples, mode)
    sites, violations, matmuls = _aggregate_eval(spec, weights, xs, pipeline, calib)
    sm_cfg = IntSoftmaxConfig(scale_in=1.0 / 256)
    tol = max_relative_exp_error(sm_cfg)
    report = {
        "mode": mode,
        "sites": sites,
        "int_softmax": {"max_relative_exp_error": tol, "grid_points": 100000,
                        "grid_range": [-10.0, 0.0]},
        "float_in_accumulator_violations": violations,
        "matmul_count": matmuls,
        "overhead_bits_per_channel": {
            "o2sf_mask": O2SF_MASK_BITS_PER_CHANNEL,
            "channelwise_shift_select": CHANNEL_SHIFT_BITS_PER_CHANNEL,
        },
        "config": cfg.to_dict(),
        "samples": int(xs.shape[0]),
    }
    _write_json(out / "report.json", report)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "scheme", "bits", "mse", "sqnr_db"])
        for site, entry in sorted(sites.items()):
            w.writerow([site, entry["scheme"], entry["bits"],
                        repr(entry["mse"]), repr(entry["sqnr_db"])])
    _echo_config(out, cfg, int(xs.shape[0]), {"mode": mode})
    print(f"{'site':24s} {'scheme':10s} {'bits':4s} {'mse':>12s} {'sqnr_db':>9s}")
    for site, entry in sorted(sites.items()):
        print(f"{site:24s} {entry['scheme']:10s} {entry['bits']:<4d} "
              f"{entry['mse']:12.4e} {entry['sqnr_db']:9.2f}")
    print(f"int-softmax max relative exp error: {tol:.4%}")
    print(f"float-in-accumulator violations: {violations}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, samples = _merge_config(args, _load_config_file(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, weights = _toy_model()
    xs = blk.sample_inputs(spec, samples, cfg.seed)
    report = compare_schemes(spec, weights, xs, cfg.bits_activations,
                             cfg.num_candidates, cfg.space_factor)
    for site, entry in report["sites"].items():
        for scheme in ("uniform", "twin_region", "v2sf"):
            hist = entry[scheme]["histogram"]
            with open(out / f"{site}__{scheme}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_left", "bin_right", "count"])
                edges, counts = hist["bin_edges"], hist["counts"]
                for i, c in enumerate(counts):
                    w.writerow([repr(edges[i]), repr(edges[i + 1]), c])
    _write_json(out / "summary.json", report)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "scheme", "mse", "lowest_mse"])
        for site, entry in sorted(report["sites"].items()):
            for scheme in ("uniform", "twin_region", "v2sf"):
                w.writerow([site, scheme, repr(entry[scheme]["mse"]),
                            int(scheme == entry["lowest_mse_scheme"])])
    _echo_config(out, cfg, samples)
    for site, entry in sorted(report["sites"].items()):
        print(f"{site}: lowest-MSE scheme = {entry['lowest_mse_scheme']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twoscale",
        description="Two-scaled post-training quantization toolkit",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="search scales for the toy block or a bundle",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true",
                     help="calibrate the seeded toy transformer block")
    src.add_argument("--bundle", default=None,
                     help="activation bundle directory (manifest.json + .npy files)")
    _add_common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("quantize", help="apply a calibration to a bundle, emit packed files",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--calibration", required=True, help="calibration.json path")
    p.add_argument("--bundle", required=True, help="activation bundle directory")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="per-site distortion report for the toy pipeline",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--mode", choices=[MODE_FAKE, MODE_INTEGER], default=MODE_FAKE)
    p.add_argument("--calibration", default=None,
                   help="reuse an existing calibration.json (else calibrate first)")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="scheme comparison histograms at the codec sites",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ArithmeticError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
