"""Dense float32 tensor substrate: validated ingestion, the `.npy` v1.0 subset
used as the on-disk contract, per-slice statistics, and named tensor bundles.

Tensors are plain C-order float32 numpy arrays. Files outside the supported
subset (non-float payloads, Fortran order, `.npy` versions other than 1.0)
are rejected rather than converted, so byte-level round-trip claims stay simple.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCRS = {"<f4", "<f8"}


class TensorFormatError(ValueError):
    """Malformed or out-of-subset `.npy` / manifest data."""


class TensorValidationError(ValueError):
    """Structurally valid data that violates a tensor invariant (NaN/Inf, shape)."""


def ensure_tensor(data, shape=None) -> np.ndarray:
    """Validate and canonicalize array-like input to a finite, C-order float32 array.

    Raises TensorValidationError on NaN/Inf or on a shape mismatch.
    """
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    arr = np.asarray(arr, dtype=np.float32, order="C")
    if arr.size and not np.isfinite(arr).all():
        raise TensorValidationError("tensor contains NaN or Inf values")
    return arr


def load_tensor(path) -> np.ndarray:
    """Read one tensor from the supported `.npy` v1.0 subset.

    Accepts little-endian f4/f8 payloads in C order; f8 is narrowed to f32 with
    round-to-nearest. Anything else in the header is a TensorFormatError.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not a .npy file")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise TensorFormatError(f"{path}: unsupported .npy version {major}.{minor}")
    (header_len,) = struct.unpack("<H", raw[8:10])
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise TensorFormatError(f"{path}: unparseable header dict") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise TensorFormatError(f"{path}: header keys must be descr/fortran_order/shape")
    descr = header["descr"]
    if descr not in _SUPPORTED_DESCRS:
        raise TensorFormatError(f"{path}: unsupported descr {descr!r} (need <f4 or <f8)")
    if header["fortran_order"] is not False:
        raise TensorFormatError(f"{path}: fortran_order=True is outside the supported subset")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise TensorFormatError(f"{path}: bad shape {shape!r}")
    itemsize = 4 if descr == "<f4" else 8
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[header_end:]
    if len(payload) != count * itemsize:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {count * itemsize}"
        )
    values = np.frombuffer(payload, dtype=descr).reshape(shape)
    if values.size and not np.isfinite(values).all():
        raise TensorValidationError(f"{path}: payload contains NaN or Inf")
    return np.asarray(values.astype(np.float32), order="C")


def save_tensor(t: np.ndarray, path) -> None:
    """Write a tensor as the `.npy` v1.0 subset (`<f4`, C order, 64-byte aligned header)."""
    t = ensure_tensor(t)
    header_dict = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        repr(tuple(int(d) for d in t.shape)),
    )
    # pad with spaces so magic+version+len+header is a multiple of 64, ending in \n
    base = len(NPY_MAGIC) + 2 + 2
    pad = 64 - ((base + len(header_dict) + 1) % 64)
    pad = 0 if pad == 64 else pad
    header = (header_dict + " " * pad + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(t.tobytes(order="C"))


@dataclass
class SliceStats:
    """Per-slice reduction results; arrays of length C for a kept axis, scalars otherwise."""

    min: np.ndarray
    max: np.ndarray
    abs_max: np.ndarray


def elementwise_stats(t: np.ndarray, axis: int | None = None) -> SliceStats:
    """Min/max/abs-max reduced over all axes except `axis` (full reduction if None)."""
    t = np.asarray(t)
    if axis is None:
        return SliceStats(
            min=np.float32(t.min()), max=np.float32(t.max()), abs_max=np.float32(np.abs(t).max())
        )
    if not -t.ndim <= axis < t.ndim:
        raise TensorValidationError(f"axis {axis} out of range for rank {t.ndim}")
    axis = axis % t.ndim
    reduce_over = tuple(i for i in range(t.ndim) if i != axis)
    return SliceStats(
        min=t.min(axis=reduce_over),
        max=t.max(axis=reduce_over),
        abs_max=np.abs(t).max(axis=reduce_over),
    )


class TensorBundle:
    """Named map of tensors (calibration activations, weights, optional `.grad` pairs).

    Gradient entries are named "<base>.grad" and must match their base tensor's shape.
    """

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t) -> None:
        self._tensors[name] = ensure_tensor(t)
        self._check_grad_shapes(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def get(self, name: str, default=None):
        return self._tensors.get(name, default)

    def _check_grad_shapes(self, name: str) -> None:
        if name.endswith(".grad"):
            base = self._tensors.get(name[: -len(".grad")])
            if base is not None and base.shape != self._tensors[name].shape:
                raise TensorValidationError(
                    f"gradient {name} shape {self._tensors[name].shape} "
                    f"!= base shape {base.shape}"
                )
        else:
            grad = self._tensors.get(name + ".grad")
            if grad is not None and grad.shape != self._tensors[name].shape:
                raise TensorValidationError(
                    f"gradient {name}.grad shape {grad.shape} != base shape "
                    f"{self._tensors[name].shape}"
                )

    def save_dir(self, directory, manifest_extra: dict | None = None) -> Path:
        """Write every tensor as <name>.npy plus a manifest.json; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in self.names():
            fname = name + ".npy"
            save_tensor(self._tensors[name], directory / fname)
            files[name] = fname
        manifest = {"kind": "tensor_bundle", "files": files}
        manifest.update(manifest_extra or {})
        manifest_path = directory / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return manifest_path

    @classmethod
    def load_dir(cls, directory) -> "TensorBundle":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise TensorFormatError(f"{directory}: no manifest.json")
        manifest = json.loads(manifest_path.read_text())
        if "files" not in manifest:
            raise TensorFormatError(f"{manifest_path}: manifest has no 'files' map")
        bundle = cls()
        for name, fname in sorted(manifest["files"].items()):
            bundle[name] = load_tensor(directory / fname)
        return bundle
