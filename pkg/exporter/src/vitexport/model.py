"""Reference ViT with capture-friendly modules.

Every attention softmax is an explicit nn.Softmax module and every MLP
activation an explicit nn.GELU, so forward hooks can grab the exact tensors
the quantization schemes target; LayerNorm inputs come from pre-hooks.
Geometries are registered by name; weights are seeded random unless a local
state-dict checkpoint is supplied (pretrained weights are loaded that way --
nothing is downloaded).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn


class ModelLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class VitGeometry:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: int = 4
    num_classes: int = 10

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


MODEL_REGISTRY = {
    # tiny geometry for fast CPU runs and tests
    "vit-micro-rand": VitGeometry(image_size=32, patch_size=8, embed_dim=48,
                                  depth=2, num_heads=3),
    # ViT-S/16 geometry at the standard 224 resolution
    "vit-small-224": VitGeometry(image_size=224, patch_size=16, embed_dim=384,
                                 depth=12, num_heads=6, num_classes=1000),
}


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.softmax = nn.Softmax(dim=-1)  # hook target: post_softmax
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = self.softmax(q @ k.transpose(-2, -1) * self.scale)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, bias=True)
        self.act = nn.GELU()  # hook target: post_gelu
        self.fc2 = nn.Linear(hidden, dim, bias=True)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)  # pre-hook target: ln1_input
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)  # pre-hook target: ln2_input
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    def __init__(self, geo: VitGeometry):
        super().__init__()
        self.geometry = geo
        self.patch_embed = nn.Conv2d(3, geo.embed_dim, kernel_size=geo.patch_size,
                                     stride=geo.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, geo.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, geo.num_patches + 1,
                                                  geo.embed_dim))
        self.blocks = nn.ModuleList(
            Block(geo.embed_dim, geo.num_heads, geo.mlp_ratio)
            for _ in range(geo.depth))
        self.norm = nn.LayerNorm(geo.embed_dim)
        self.head = nn.Linear(geo.embed_dim, geo.num_classes)

    def forward(self, images):
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x)[:, 0])


def build_model(model_id: str, seed: int = 0, checkpoint: str | None = None
                ) -> VisionTransformer:
    """Instantiate a registered geometry; seeded random init, or a local
    state-dict checkpoint when one is given."""
    if model_id not in MODEL_REGISTRY:
        raise ModelLoadError(
            f"unknown model {model_id!r}; available: {sorted(MODEL_REGISTRY)}")
    torch.manual_seed(seed)
    model = VisionTransformer(MODEL_REGISTRY[model_id])
    with torch.no_grad():
        nn.init.normal_(model.pos_embed, std=0.02)
        nn.init.normal_(model.cls_token, std=0.02)
    if checkpoint is not None:
        path = Path(checkpoint)
        if not path.exists():
            raise ModelLoadError(f"checkpoint not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except (RuntimeError, ValueError, KeyError) as exc:
            raise ModelLoadError(f"cannot load checkpoint {path}: {exc}") from exc
    model.eval()
    return model
