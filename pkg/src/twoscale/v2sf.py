"""Value-aware two-scaled codec for post-softmax and post-GeLU activations.

Each element is first quantized on an extended grid with a fine scale s_s
((b-1)+m value bits), then split by magnitude: small codes keep their least
significant bits at scale s_s, large codes keep their most significant bits
(first truncated bit rounded) at the coarse scale s_l = 2^m * s_s. One region
bit per element selects the scale, so the stored width is exactly b bits.
Decoding a large element is an integer left shift followed by one multiply --
the shift-alignment property the dual scales are built around.

Softmax payloads are unsigned; GeLU payloads spend one small-region bit on the
sign, and negative values are clamped into the small region because large
magnitudes only occur on the positive side.

Also provides the fixed two-region comparison baseline (s_R2 pinned to
1/2^(b-1) for softmax; negative/positive split for GeLU).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quant import QuantParams, QuantizedTensor, round_half_away

KIND_SOFTMAX = "softmax"
KIND_GELU = "gelu"

DEFAULT_SHIFT = {KIND_SOFTMAX: 4, KIND_GELU: 3}

V2SF_MAGIC = b"V2SF"
V2SF_VERSION = 1
_KIND_CODE = {KIND_SOFTMAX: 0, KIND_GELU: 1}
_KIND_FROM_CODE = {v: k for k, v in _KIND_CODE.items()}


class V2sfError(ValueError):
    pass


@dataclass(frozen=True)
class V2sfParams:
    kind: str  # "softmax" | "gelu"
    bits: int  # total stored bits per element, region bit included
    shift: int  # m: log2 ratio between the coarse and fine scales
    scale_small: float  # s_s

    def __post_init__(self):
        if self.kind not in (KIND_SOFTMAX, KIND_GELU):
            raise V2sfError(f"kind must be softmax or gelu, got {self.kind!r}")
        if self.bits < 4:
            raise V2sfError("bits must be >= 4")
        if self.shift < 1:
            raise V2sfError("shift must be >= 1")
        if not (self.scale_small > 0 and math.isfinite(self.scale_small)):
            raise V2sfError("scale_small must be positive and finite")
        # the coarsened region must start within one rounding step of the
        # threshold, otherwise a large code could round down to an empty level
        max_shift = self.bits if self.kind == KIND_SOFTMAX else self.bits - 1
        if self.shift > max_shift:
            raise V2sfError(f"shift {self.shift} too large for {self.kind} at {self.bits} bits")
        if self.extended_bits + 1 > 31:
            raise V2sfError("bits/shift combination exceeds 32-bit intermediate codes")

    @property
    def scale_large(self) -> float:
        """s_l = 2^m * s_s, exact in binary floating point."""
        return self.scale_small * (1 << self.shift)

    @property
    def extended_bits(self) -> int:
        """Value bits of the initial extended quantization (sign excluded for gelu)."""
        return (self.bits - 1) + self.shift

    @property
    def small_threshold(self) -> int:
        """Extended codes with |code| below this stay in the fine region."""
        return 1 << (self.bits - 1) if self.kind == KIND_SOFTMAX else 1 << (self.bits - 2)

    @property
    def small_code_bits(self) -> int:
        """Magnitude bits stored for a fine-region element (sign excluded)."""
        return self.bits - 1 if self.kind == KIND_SOFTMAX else self.bits - 2

    @property
    def stored_max(self) -> int:
        """Largest coarse-region stored code: 2^(b-1) - 1."""
        return (1 << (self.bits - 1)) - 1

    @property
    def extended_max(self) -> int:
        return (1 << self.extended_bits) - 1

    @property
    def extended_min(self) -> int:
        # negatives exist only for gelu and are confined to the fine region
        return 0 if self.kind == KIND_SOFTMAX else -(self.small_threshold - 1)


@dataclass
class V2sfEncoded:
    shape: tuple
    payload: bytes  # b bits per element, MSB-first, zero-padded to a byte
    params: V2sfParams

    def __post_init__(self):
        count = int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1
        expected = (count * self.params.bits + 7) // 8
        if len(self.payload) != expected:
            raise V2sfError(f"payload is {len(self.payload)} bytes, expected {expected}")


def v2sf_bits_per_element(p: V2sfParams) -> int:
    """Stored bits per element; identical for both regions by construction."""
    if p.kind == KIND_SOFTMAX:
        small = 1 + p.small_code_bits          # region + value
    else:
        small = 1 + 1 + p.small_code_bits      # region + sign + magnitude
    large = 1 + (p.bits - 1)                   # region + magnitude
    assert small == large == p.bits
    return p.bits


def _pack_words(words: np.ndarray, bits: int) -> bytes:
    """Pack unsigned `bits`-wide words MSB-first into a byte stream."""
    if words.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bit_matrix = ((words[:, None].astype(np.uint32) >> shifts) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.ravel(), bitorder="big").tobytes()


def _unpack_words(payload: bytes, bits: int, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(payload, dtype=np.uint8)
    bit_stream = np.unpackbits(raw, count=count * bits, bitorder="big")
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return bit_stream.reshape(count, bits).astype(np.int64) @ weights


def _extended_codes(t: np.ndarray, p: V2sfParams) -> np.ndarray:
    """Initial quantization at the fine scale on the extended grid."""
    t = np.asarray(t, dtype=np.float64)
    if p.kind == KIND_SOFTMAX and t.size and t.min() < 0:
        raise V2sfError("softmax inputs must be non-negative")
    full = round_half_away(t / p.scale_small)
    return np.clip(full, p.extended_min, p.extended_max).astype(np.int64)


def _split_regions(full: np.ndarray, p: V2sfParams):
    """(region, sign, stored) triples from extended codes.

    region 0 keeps |code| verbatim; region 1 drops the low m bits, rounding
    the first truncated one, and clamps at the stored maximum.
    """
    mag = np.abs(full)
    region = (mag >= p.small_threshold).astype(np.int64)
    sign = (full < 0).astype(np.int64)
    coarse = np.minimum((mag + (1 << (p.shift - 1))) >> p.shift, p.stored_max)
    stored = np.where(region == 1, coarse, mag)
    return region, sign, stored


def codes_to_words(region: np.ndarray, sign: np.ndarray, stored: np.ndarray,
                   p: V2sfParams) -> np.ndarray:
    """Assemble per-element payload words (MSB->LSB layouts per kind/region)."""
    b = p.bits
    if p.kind == KIND_SOFTMAX:
        return (region << (b - 1)) | stored
    small_word = (sign << (b - 2)) | stored
    large_word = (1 << (b - 1)) | stored
    return np.where(region == 1, large_word, small_word)


def words_to_codes(words: np.ndarray, p: V2sfParams):
    """Inverse of codes_to_words."""
    b = p.bits
    region = words >> (b - 1)
    if p.kind == KIND_SOFTMAX:
        stored = words & ((1 << (b - 1)) - 1)
        sign = np.zeros_like(words)
    else:
        large_mag = words & ((1 << (b - 1)) - 1)
        small_sign = (words >> (b - 2)) & 1
        small_mag = words & ((1 << (b - 2)) - 1)
        stored = np.where(region == 1, large_mag, small_mag)
        sign = np.where(region == 1, 0, small_sign)
    return region, sign, stored


def v2sf_encode(t: np.ndarray, p: V2sfParams) -> V2sfEncoded:
    t = np.asarray(t)
    full = _extended_codes(t, p)
    region, sign, stored = _split_regions(full.ravel(), p)
    words = codes_to_words(region, sign, stored, p)
    return V2sfEncoded(shape=tuple(t.shape), payload=_pack_words(words, p.bits), params=p)


def integer_levels(e: V2sfEncoded) -> np.ndarray:
    """Signed integer levels such that value = level * s_s (region shift folded in)."""
    count = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
    words = _unpack_words(e.payload, e.params.bits, count)
    region, sign, stored = words_to_codes(words, e.params)
    level = np.where(region == 1, stored << e.params.shift, stored)
    level = np.where(sign == 1, -level, level)
    return level.reshape(e.shape)


def v2sf_decode(e: V2sfEncoded) -> np.ndarray:
    """Integer shift + one float multiply; exact inverse on canonical codes."""
    return (integer_levels(e) * np.float64(e.params.scale_small)).astype(np.float32)


def v2sf_decode_levels(t: np.ndarray, p: V2sfParams) -> np.ndarray:
    """Encode-then-decode integer levels without packing (fast path for sweeps)."""
    full = _extended_codes(t, p)
    region, sign, stored = _split_regions(full, p)
    level = np.where(region == 1, stored << p.shift, stored)
    return np.where(sign == 1, -level, level)


def v2sf_qdq(t: np.ndarray, p: V2sfParams) -> np.ndarray:
    """Fake-quantization round trip through the two-region grid."""
    return (v2sf_decode_levels(t, p) * np.float64(p.scale_small)).astype(np.float32)


def canonical_codes(p: V2sfParams):
    """Every (region, sign, stored) triple the encoder can emit.

    Region-1 stored codes start at ceil(threshold / 2^m) (value 0 and values
    below the threshold re-encode into region 0); "-0" is excluded because the
    encoder only sets the sign bit for strictly negative codes.
    """
    triples = []
    for mag in range(p.small_threshold):
        triples.append((0, 0, mag))
    if p.kind == KIND_GELU:
        for mag in range(1, p.small_threshold):
            triples.append((0, 1, mag))
    lo = max(1, -(-p.small_threshold // (1 << p.shift)))
    for stored in range(lo, p.stored_max + 1):
        triples.append((1, 0, stored))
    return triples


def distinct_levels(p: V2sfParams) -> np.ndarray:
    """Sorted distinct integer levels the codec can produce."""
    levels = set()
    for region, sign, stored in canonical_codes(p):
        level = stored << p.shift if region else stored
        levels.add(-level if sign else level)
    return np.array(sorted(levels), dtype=np.int64)


def encoded_from_codes(region, sign, stored, p: V2sfParams, shape=None) -> V2sfEncoded:
    """Build an encoding directly from code triples (tests, file tooling)."""
    region = np.asarray(region, dtype=np.int64)
    sign = np.asarray(sign, dtype=np.int64)
    stored = np.asarray(stored, dtype=np.int64)
    words = codes_to_words(region.ravel(), sign.ravel(), stored.ravel(), p)
    shape = tuple(shape) if shape is not None else tuple(region.shape)
    return V2sfEncoded(shape=shape, payload=_pack_words(words, p.bits), params=p)


def payload_words(e: V2sfEncoded) -> np.ndarray:
    count = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
    return _unpack_words(e.payload, e.params.bits, count)


# ---------------------------------------------------------------------------
# V2SF1 container: header + MSB-first packed payload
# ---------------------------------------------------------------------------

def save_v2sf(e: V2sfEncoded, path) -> None:
    p = e.params
    with open(path, "wb") as fh:
        fh.write(V2SF_MAGIC)
        fh.write(struct.pack("<BBBB", V2SF_VERSION, _KIND_CODE[p.kind], p.bits, p.shift))
        fh.write(struct.pack("<f", np.float32(p.scale_small)))
        fh.write(struct.pack("<B", len(e.shape)))
        for d in e.shape:
            fh.write(struct.pack("<I", d))
        fh.write(e.payload)


def load_v2sf(path) -> V2sfEncoded:
    raw = Path(path).read_bytes()
    if raw[:4] != V2SF_MAGIC:
        raise V2sfError(f"{path}: bad magic")
    version, kind_code, bits, shift = struct.unpack("<BBBB", raw[4:8])
    if version != V2SF_VERSION:
        raise V2sfError(f"{path}: unsupported version {version}")
    if kind_code not in _KIND_FROM_CODE:
        raise V2sfError(f"{path}: unknown kind code {kind_code}")
    (scale_small,) = struct.unpack("<f", raw[8:12])
    (rank,) = struct.unpack("<B", raw[12:13])
    dims = struct.unpack("<" + "I" * rank, raw[13:13 + 4 * rank])
    payload = raw[13 + 4 * rank:]
    params = V2sfParams(kind=_KIND_FROM_CODE[kind_code], bits=bits, shift=shift,
                        scale_small=float(scale_small))
    return V2sfEncoded(shape=tuple(dims), payload=payload, params=params)


# ---------------------------------------------------------------------------
# Fixed two-region comparison baseline
# ---------------------------------------------------------------------------

@dataclass
class TwinRegionEncoded:
    """Fixed-scale two-region codes: region flag + (b-1)-bit value per element.

    Softmax: s_r2 pinned to 1/2^(b-1) (covers [0, 1] regardless of the data),
    s_r1 = s_r2 / 2^m, split at 2^(b-1) * s_r1. GeLU: negative values on the
    fine scale s_r1, positive on s_r2.
    """

    kind: str
    bits: int
    shift: int
    scale_r1: float
    scale_r2: float
    region: np.ndarray  # 1 where the coarse/positive scale applies
    codes: np.ndarray   # signed magnitudes on the selected scale

    def decode(self) -> np.ndarray:
        scale = np.where(self.region == 1, self.scale_r2, self.scale_r1)
        return (self.codes.astype(np.float64) * scale).astype(np.float32)

    def as_quantized_pair(self) -> tuple[QuantizedTensor, QuantizedTensor]:
        """Per-region views as plain quantized tensors (codes zeroed off-region)."""
        r1 = QuantizedTensor(np.where(self.region == 0, self.codes, 0),
                             QuantParams(scale=self.scale_r1, bits=self.bits))
        r2 = QuantizedTensor(np.where(self.region == 1, self.codes, 0),
                             QuantParams(scale=self.scale_r2, bits=self.bits))
        return r1, r2

    def region2_bin_occupancy(self) -> tuple[int, int]:
        """(occupied, total) over the 2^(b-1) coarse-region bins."""
        total = 1 << (self.bits - 1)
        used = np.unique(self.codes[self.region == 1])
        return int(used.size), total


def twin_region_encode(t: np.ndarray, kind: str, bits: int, shift: int,
                       scale_r2: float | None = None) -> TwinRegionEncoded:
    """Fixed two-region scheme: softmax s_r2 = 1/2^(b-1); gelu negative/positive split.

    For gelu, scale_r2 defaults to max(positive)/(2^(b-1)-1) when not given
    (the softmax s_r2 is always the pinned constant).
    """
    t = np.asarray(t, dtype=np.float64)
    half = 1 << (bits - 1)
    if kind == KIND_SOFTMAX:
        if t.size and t.min() < 0:
            raise V2sfError("softmax inputs must be non-negative")
        s_r2 = 1.0 / half
        s_r1 = s_r2 / (1 << shift)
        threshold = half * s_r1
        region = (t >= threshold).astype(np.int64)
        codes = np.where(
            region == 1,
            np.clip(round_half_away(t / s_r2), 0, half - 1),
            np.clip(round_half_away(t / s_r1), 0, half - 1),
        ).astype(np.int32)
    elif kind == KIND_GELU:
        pos = t[t > 0]
        s_r2 = scale_r2 if scale_r2 is not None else (
            float(pos.max()) / (half - 1) if pos.size else 1.0)
        s_r1 = s_r2 / (1 << shift)
        region = (t >= 0).astype(np.int64)
        codes = np.where(
            region == 1,
            np.clip(round_half_away(t / s_r2), 0, half - 1),
            np.clip(round_half_away(t / s_r1), -(half - 1), 0),
        ).astype(np.int32)
    else:
        raise V2sfError(f"kind must be softmax or gelu, got {kind!r}")
    return TwinRegionEncoded(kind=kind, bits=bits, shift=shift, scale_r1=s_r1,
                             scale_r2=s_r2, region=region, codes=codes)
