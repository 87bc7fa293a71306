import ast

import numpy as np
import pytest

from vitexport.npyio import write_npy_f32


def test_numpy_reads_our_files(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 1, 6), ()]:
        t = rng.standard_normal(shape).astype(np.float32)
        p = tmp_path / "t.npy"
        write_npy_f32(t, p)
        assert np.array_equal(np.load(p), t)


def test_subset_header_fields(tmp_path):
    p = tmp_path / "t.npy"
    write_npy_f32(np.zeros((2, 3), dtype=np.float32), p)
    raw = p.read_bytes()
    assert raw[:6] == b"\x93NUMPY"
    assert (raw[6], raw[7]) == (1, 0)
    header_len = int.from_bytes(raw[8:10], "little")
    assert (10 + header_len) % 64 == 0
    header = ast.literal_eval(raw[10:10 + header_len].decode("latin1").strip())
    assert header == {"descr": "<f4", "fortran_order": False, "shape": (2, 3)}


def test_write_deterministic(tmp_path):
    t = np.arange(12, dtype=np.float32).reshape(3, 4)
    a, b = tmp_path / "a.npy", tmp_path / "b.npy"
    write_npy_f32(t, a)
    write_npy_f32(t, b)
    assert a.read_bytes() == b.read_bytes()


def test_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_npy_f32(np.array([np.nan], dtype=np.float32), tmp_path / "n.npy")
