"""Writer for the `.npy` v1.0 subset the quantization toolkit ingests.

The boundary format is the contract, not any shared code: version 1.0, descr
'<f4', fortran_order False, C-order little-endian payload, header padded to a
64-byte multiple. Kept deliberately tiny and dependency-free.
"""

from __future__ import annotations

import struct

import numpy as np

NPY_MAGIC = b"\x93NUMPY"


def write_npy_f32(array, path) -> None:
    arr = np.asarray(array, dtype=np.float32, order="C")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{path}: refusing to write NaN/Inf values")
    header_dict = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        repr(tuple(int(d) for d in arr.shape)),
    )
    base = len(NPY_MAGIC) + 2 + 2
    pad = 64 - ((base + len(header_dict) + 1) % 64)
    pad = 0 if pad == 64 else pad
    header = (header_dict + " " * pad + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))
