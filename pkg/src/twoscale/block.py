"""Deterministic toy pre-norm transformer block (attention + MLP + two LayerNorms).

Small enough for exhaustive oracles, large enough that both attention heads
and both LayerNorm sites are nontrivial. All matmuls accumulate left-to-right
over the inner dimension in float64 (no BLAS reassociation), so outputs are
bit-stable for a given seed and shape; exposed tensors are float32.
LayerNorm has no affine parameters and the linears carry no biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tensor import TensorBundle, ensure_tensor

LN_EPS = 1e-5

# activation sites quantized by the pipeline, in forward order
SITE_LN1_INPUT = "ln1_input"
SITE_LN1_OUTPUT = "ln1_output"
SITE_QKV_OUTPUT = "qkv_output"
SITE_ATTENTION_LOGITS = "attention_logits"
SITE_POST_SOFTMAX = "post_softmax"
SITE_ATTN_OUTPUT = "attn_output"
SITE_LN2_INPUT = "ln2_input"
SITE_LN2_OUTPUT = "ln2_output"
SITE_POST_GELU = "post_gelu"

ACTIVATION_SITES = [
    SITE_LN1_INPUT, SITE_LN1_OUTPUT, SITE_QKV_OUTPUT, SITE_ATTENTION_LOGITS,
    SITE_POST_SOFTMAX, SITE_ATTN_OUTPUT, SITE_LN2_INPUT, SITE_LN2_OUTPUT,
    SITE_POST_GELU,
]

# weight sites (per-tensor scales)
SITE_QKV_WEIGHTS = "qkv_weights"
SITE_PROJ_WEIGHTS = "proj_weights"
SITE_FC1_WEIGHTS = "fc1_weights"
SITE_FC2_WEIGHTS = "fc2_weights"

WEIGHT_SITES = [SITE_QKV_WEIGHTS, SITE_PROJ_WEIGHTS, SITE_FC1_WEIGHTS, SITE_FC2_WEIGHTS]

# unquantized capture points (gradient anchors and report references)
CAPTURE_ATTN_PROJ_OUTPUT = "attn_proj_output"
CAPTURE_FC1_OUTPUT = "mlp_fc1_output"
CAPTURE_FC2_OUTPUT = "mlp_fc2_output"
CAPTURE_BLOCK_OUTPUT = "block_output"

CAPTURE_ONLY = [CAPTURE_ATTN_PROJ_OUTPUT, CAPTURE_FC1_OUTPUT, CAPTURE_FC2_OUTPUT,
                CAPTURE_BLOCK_OUTPUT]

DEFAULT_PREFIX = "block0"


class BlockError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    embed_dim: int = 16
    num_heads: int = 2
    seq_len: int = 8
    mlp_ratio: int = 4
    seed: int = 42

    def __post_init__(self):
        if min(self.embed_dim, self.num_heads, self.seq_len, self.mlp_ratio) < 1:
            raise BlockError("all block dimensions must be >= 1")
        if self.embed_dim % self.num_heads:
            raise BlockError("embed_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return {"embed_dim": self.embed_dim, "num_heads": self.num_heads,
                "seq_len": self.seq_len, "mlp_ratio": self.mlp_ratio, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class BlockWeights:
    qkv: np.ndarray   # (d, 3d)
    proj: np.ndarray  # (d, d)
    fc1: np.ndarray   # (d, hidden)
    fc2: np.ndarray   # (hidden, d)

    def site_map(self) -> dict[str, np.ndarray]:
        return {SITE_QKV_WEIGHTS: self.qkv, SITE_PROJ_WEIGHTS: self.proj,
                SITE_FC1_WEIGHTS: self.fc1, SITE_FC2_WEIGHTS: self.fc2}


QKV_GAIN = 5.0
FC1_GAIN = 6.0


def init_weights(spec: BlockSpec) -> BlockWeights:
    """Seeded uniform in [-0.5, 0.5] scaled by 1/sqrt(d); generation order is fixed.

    qkv and fc1 get extra gains so the toy's activations take the shapes the
    quantizers are designed around: at unit gain the attention logits are so
    small that softmax rows come out near-uniform (no sparse/peaked mass), and
    the post-GeLU positive lobe stays narrower than the fixed ~-0.17 negative
    lobe, which the two-region GeLU format (negative coverage max/2^(m+1))
    would clamp at every bit-width.
    """
    rng = np.random.default_rng(spec.seed)
    d, hid = spec.embed_dim, spec.hidden_dim
    scale = 1.0 / np.sqrt(d)

    def draw(rows, cols, gain=1.0):
        return (rng.uniform(-0.5, 0.5, size=(rows, cols)) * (scale * gain)).astype(
            np.float32)

    return BlockWeights(qkv=draw(d, 3 * d, gain=QKV_GAIN), proj=draw(d, d),
                        fc1=draw(d, hid, gain=FC1_GAIN), fc2=draw(hid, d))


def zero_weights(spec: BlockSpec) -> BlockWeights:
    d, hid = spec.embed_dim, spec.hidden_dim
    z = lambda r, c: np.zeros((r, c), dtype=np.float32)
    return BlockWeights(qkv=z(d, 3 * d), proj=z(d, d), fc1=z(d, hid), fc2=z(hid, d))


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float64 matmul with explicit left-to-right accumulation over the inner axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=np.float64)
    for k in range(a.shape[-1]):
        out += a[..., k, None] * b[k, :]
    return out


def layernorm(x: np.ndarray) -> np.ndarray:
    """Normalization over the last axis, no affine parameters."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def split_heads(t: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """(n, d) -> (heads, n, head_dim)."""
    n = t.shape[0]
    return t.reshape(n, spec.num_heads, spec.head_dim).transpose(1, 0, 2)


def merge_heads(t: np.ndarray) -> np.ndarray:
    """(heads, n, head_dim) -> (n, heads*head_dim)."""
    h, n, hd = t.shape
    return t.transpose(1, 0, 2).reshape(n, h * hd)


def fp_forward(spec: BlockSpec, weights: BlockWeights, x: np.ndarray,
               capture: bool = False):
    """Float reference forward pass for one (seq_len, embed_dim) sample.

    With capture=True also returns the per-site intermediate dict used for
    calibration and error reporting.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.seq_len, spec.embed_dim):
        raise BlockError(f"input shape {x.shape} != {(spec.seq_len, spec.embed_dim)}")
    sites: dict[str, np.ndarray] = {}

    sites[SITE_LN1_INPUT] = x
    ln1 = layernorm(x)
    sites[SITE_LN1_OUTPUT] = ln1
    qkv = ordered_matmul(ln1, weights.qkv)
    sites[SITE_QKV_OUTPUT] = qkv
    d = spec.embed_dim
    q = split_heads(qkv[:, :d], spec)
    k = split_heads(qkv[:, d:2 * d], spec)
    v = split_heads(qkv[:, 2 * d:], spec)
    inv_sqrt_hd = 1.0 / np.sqrt(spec.head_dim)
    logits = np.stack([ordered_matmul(q[h], k[h].T) * inv_sqrt_hd
                       for h in range(spec.num_heads)])
    sites[SITE_ATTENTION_LOGITS] = logits
    probs = softmax(logits, axis=-1)
    sites[SITE_POST_SOFTMAX] = probs
    attn = merge_heads(np.stack([ordered_matmul(probs[h], v[h])
                                 for h in range(spec.num_heads)]))
    sites[SITE_ATTN_OUTPUT] = attn
    proj = ordered_matmul(attn, weights.proj)
    sites[CAPTURE_ATTN_PROJ_OUTPUT] = proj
    r1 = x + proj
    sites[SITE_LN2_INPUT] = r1
    ln2 = layernorm(r1)
    sites[SITE_LN2_OUTPUT] = ln2
    f1 = ordered_matmul(ln2, weights.fc1)
    sites[CAPTURE_FC1_OUTPUT] = f1
    g = gelu(f1)
    sites[SITE_POST_GELU] = g
    f2 = ordered_matmul(g, weights.fc2)
    sites[CAPTURE_FC2_OUTPUT] = f2
    out = r1 + f2
    sites[CAPTURE_BLOCK_OUTPUT] = out

    out32 = out.astype(np.float32)
    if capture:
        return out32, {name: t.astype(np.float32) for name, t in sites.items()}
    return out32


def sample_inputs(spec: BlockSpec, count: int, seed: int) -> np.ndarray:
    """Seeded standard-normal batch of calibration inputs, shape (count, n, d)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, spec.seq_len, spec.embed_dim)).astype(np.float32)


def capture_calibration(spec: BlockSpec, weights: BlockWeights, xs: np.ndarray,
                        prefix: str = DEFAULT_PREFIX) -> TensorBundle:
    """Run fp_forward over a batch and stack every capture with a leading sample axis."""
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim != 3:
        raise BlockError("expected a (samples, seq_len, embed_dim) batch")
    stacks: dict[str, list[np.ndarray]] = {}
    for i in range(xs.shape[0]):
        _, sites = fp_forward(spec, weights, xs[i], capture=True)
        for name, t in sites.items():
            stacks.setdefault(name, []).append(t)
    bundle = TensorBundle()
    for name, parts in stacks.items():
        bundle[f"{prefix}.{name}"] = np.stack(parts)
    return bundle


def synthetic_gradients(bundle: TensorBundle, seed: int,
                        prefix: str = DEFAULT_PREFIX) -> None:
    """Attach seeded standard-normal gradients for every captured tensor in place."""
    rng = np.random.default_rng(seed)
    for name in bundle.names():
        if name.endswith(".grad"):
            continue
        bundle[name + ".grad"] = rng.standard_normal(bundle[name].shape).astype(np.float32)


def save_weights(spec: BlockSpec, weights: BlockWeights, directory) -> None:
    """Weight bundle directory: one .npy per site plus a manifest."""
    bundle = TensorBundle({name: ensure_tensor(w) for name, w in weights.site_map().items()})
    bundle.save_dir(directory, manifest_extra={"kind": "block_weights",
                                               "spec": spec.to_dict()})


def load_weights(directory) -> tuple[BlockSpec, BlockWeights]:
    import json
    from pathlib import Path

    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    spec = BlockSpec.from_dict(manifest["spec"])
    bundle = TensorBundle.load_dir(directory)
    return spec, BlockWeights(qkv=bundle[SITE_QKV_WEIGHTS], proj=bundle[SITE_PROJ_WEIGHTS],
                              fc1=bundle[SITE_FC1_WEIGHTS], fc2=bundle[SITE_FC2_WEIGHTS])
