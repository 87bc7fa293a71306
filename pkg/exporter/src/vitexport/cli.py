"""Batch export entry point: vit-export / python -m vitexport."""

from __future__ import annotations

import argparse
import json
import sys

from .capture import ExportError, export_activations, export_gradients
from .model import MODEL_REGISTRY, ModelLoadError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vit-export",
        description="Capture ViT activations (and optional gradients) into an "
                    ".npy bundle consumable by the quantization toolkit")
    p.add_argument("--model", default="vit-micro-rand",
                   choices=sorted(MODEL_REGISTRY))
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--sites", nargs="*", default=None,
                   help="site names (default: every block's four sites)")
    p.add_argument("--checkpoint", default=None,
                   help="local state-dict .pt with pretrained weights")
    p.add_argument("--gradients", action="store_true",
                   help="also export cross-entropy gradients per site")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = export_activations(args.model, args.samples, args.seed, args.out,
                                      sites=args.sites, checkpoint=args.checkpoint)
        if args.gradients:
            manifest = export_gradients(args.model, args.samples, args.seed, args.out,
                                        sites=args.sites, checkpoint=args.checkpoint)
        doc = json.loads(manifest.read_text())
        ratio = doc["stats"].get("ln_input_max_median_ratio_overall")
        print(f"bundle: {manifest.parent} ({len(doc['files'])} files)")
        if ratio is not None:
            print(f"LayerNorm-input max/median channel ratio: {ratio:.1f}x")
        print(f"post-softmax row-sum max error: "
              f"{doc['stats']['post_softmax_row_sum_max_err']:.2e}")
        return 0
    except (ExportError, ModelLoadError, FileNotFoundError) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
