"""Forward/backward hook capture into the shared bundle layout.

Site names follow the quantization toolkit's vocabulary exactly:
block{i}.ln1_input, block{i}.post_softmax, block{i}.ln2_input,
block{i}.post_gelu (gradients as "<site>.grad"). One .npy per site with the
sample axis leading; manifest.json is written last, so its presence marks a
complete bundle. Everything is deterministic for a fixed (model seed, data
seed) pair.
"""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import VisionTransformer, build_model
from .npyio import write_npy_f32

log = logging.getLogger(__name__)

SITE_LN1_INPUT = "ln1_input"
SITE_LN2_INPUT = "ln2_input"
SITE_POST_SOFTMAX = "post_softmax"
SITE_POST_GELU = "post_gelu"
BLOCK_SITES = [SITE_LN1_INPUT, SITE_POST_SOFTMAX, SITE_LN2_INPUT, SITE_POST_GELU]

MANIFEST_NAME = "manifest.json"
NEAR_ZERO_GRAD_NORM = 1e-8


class ExportError(ValueError):
    pass


def available_sites(model: VisionTransformer) -> list[str]:
    return [f"block{i}.{site}" for i in range(len(model.blocks))
            for site in BLOCK_SITES]


def _install_hooks(model: VisionTransformer, wanted: set[str], store: dict,
                   grads: dict | None):
    """Type-driven hooks: softmax/GELU outputs, LayerNorm inputs."""
    handles = []

    def capture(name):
        def fn(tensor):
            if grads is not None:
                tensor.retain_grad()
                tensor.register_hook(
                    lambda g, name=name: grads.__setitem__(name, g.detach()))
            store[name] = tensor.detach()
        return fn

    for i, block in enumerate(model.blocks):
        targets = {
            f"block{i}.{SITE_LN1_INPUT}": ("pre", block.norm1),
            f"block{i}.{SITE_LN2_INPUT}": ("pre", block.norm2),
            f"block{i}.{SITE_POST_SOFTMAX}": ("post", block.attn.softmax),
            f"block{i}.{SITE_POST_GELU}": ("post", block.mlp.act),
        }
        for name, (kind, module) in targets.items():
            if name not in wanted:
                continue
            grab = capture(name)
            if kind == "pre":
                handles.append(module.register_forward_pre_hook(
                    lambda mod, args, grab=grab: grab(args[0])))
            else:
                handles.append(module.register_forward_hook(
                    lambda mod, args, out, grab=grab: grab(out)))
    return handles


def _sample_images(model: VisionTransformer, sample_count: int, seed: int):
    gen = torch.Generator().manual_seed(seed)
    size = model.geometry.image_size
    return torch.randn(sample_count, 3, size, size, generator=gen)


def _resolve_sites(model: VisionTransformer, sites) -> list[str]:
    known = available_sites(model)
    if sites is None:
        return known
    unknown = [s for s in sites if s not in known]
    if unknown:
        raise ExportError(f"unknown sites {unknown}; available: {known}")
    return list(sites)


def _write_bundle(out_dir: Path, tensors: dict[str, torch.Tensor],
                  manifest_extra: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(tensors):
        fname = name + ".npy"
        write_npy_f32(tensors[name].to(torch.float32).numpy(), out_dir / fname)
        files[name] = fname
    manifest = {"kind": "activation_bundle", "files": files}
    manifest.update(manifest_extra)
    # written last: a manifest on disk means every listed file already exists
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out_dir / MANIFEST_NAME


def _bundle_stats(tensors: dict[str, torch.Tensor]) -> dict:
    stats: dict = {}
    ratios = {}
    softmax_err = 0.0
    for name, t in tensors.items():
        suffix = name.rsplit(".", 1)[-1]
        if suffix in (SITE_LN1_INPUT, SITE_LN2_INPUT):
            chan_abs = t.abs().flatten(0, -2).max(dim=0).values
            median = float(chan_abs.median())
            ratios[name] = float(chan_abs.max()) / median if median > 0 else float("inf")
        elif suffix == SITE_POST_SOFTMAX:
            softmax_err = max(softmax_err,
                              float((t.sum(dim=-1) - 1.0).abs().max()))
    if ratios:
        stats["ln_input_max_median_ratio"] = {k: ratios[k] for k in sorted(ratios)}
        stats["ln_input_max_median_ratio_overall"] = max(ratios.values())
    stats["post_softmax_row_sum_max_err"] = softmax_err
    return stats


def export_activations(model_id: str, sample_count: int, seed: int, out_dir,
                       sites=None, checkpoint: str | None = None,
                       model: VisionTransformer | None = None) -> Path:
    """Capture the named sites for sample_count seeded images; returns the
    manifest path (written after every tensor file)."""
    if sample_count < 1:
        raise ExportError("sample_count must be >= 1")
    model = model if model is not None else build_model(model_id, seed=seed,
                                                        checkpoint=checkpoint)
    wanted = _resolve_sites(model, sites)
    store: dict[str, torch.Tensor] = {}
    handles = _install_hooks(model, set(wanted), store, grads=None)
    try:
        with torch.no_grad():
            model(_sample_images(model, sample_count, seed))
    finally:
        for h in handles:
            h.remove()
    manifest_extra = {
        "model": model_id,
        "sample_count": sample_count,
        "seed": seed,
        "sites": sorted(wanted),
        "stats": _bundle_stats(store),
    }
    return _write_bundle(Path(out_dir), store, manifest_extra)


def gradient_health(grads: dict[str, torch.Tensor]) -> list[str]:
    """Names whose gradients are effectively zero (a near-zero-loss batch)."""
    return sorted(name for name, g in grads.items()
                  if float(g.abs().max()) < NEAR_ZERO_GRAD_NORM)


def export_gradients(model_id: str, sample_count: int, seed: int, out_dir,
                     sites=None, checkpoint: str | None = None,
                     model: VisionTransformer | None = None,
                     labels: torch.Tensor | None = None) -> Path:
    """Append "<site>.grad" files to a bundle directory.

    Differentiates a cross-entropy task loss against seeded random labels
    when none are given; near-zero gradients are flagged with a warning (the
    metric they feed degenerates on them).
    """
    if sample_count < 1:
        raise ExportError("sample_count must be >= 1")
    model = model if model is not None else build_model(model_id, seed=seed,
                                                        checkpoint=checkpoint)
    wanted = _resolve_sites(model, sites)
    store: dict[str, torch.Tensor] = {}
    grads: dict[str, torch.Tensor] = {}
    handles = _install_hooks(model, set(wanted), store, grads=grads)
    try:
        images = _sample_images(model, sample_count, seed)
        if labels is None:
            gen = torch.Generator().manual_seed(seed + 1)
            labels = torch.randint(0, model.geometry.num_classes, (sample_count,),
                                   generator=gen)
        logits = model(images)
        loss = torch.nn.functional.cross_entropy(logits, labels)
        loss.backward()
    finally:
        for h in handles:
            h.remove()
    missing = [name for name in wanted if name not in grads]
    if missing:
        raise ExportError(f"no gradient reached sites {missing}")
    flat = gradient_health(grads)
    if flat:
        warnings.warn(f"near-zero gradients at {flat}: the batch loss is ~0 and "
                      "a gradient-weighted metric will degenerate", stacklevel=2)

    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ExportError(f"{out_dir} has no manifest; export activations first")
    manifest = json.loads(manifest_path.read_text())
    for name in sorted(grads):
        fname = name + ".grad.npy"
        write_npy_f32(grads[name].to(torch.float32).numpy(), out_dir / fname)
        manifest["files"][name + ".grad"] = fname
    manifest["gradients"] = sorted(n + ".grad" for n in grads)
    manifest["loss"] = float(loss.detach())
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest_path
