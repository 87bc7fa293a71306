"""Outlier-aware dual-scale quantization for high-variance channel dimensions.

A 1-D 2-means split over per-channel absolute maxima marks outlier channels,
which get their own scale s_o while the rest share s_n = s_o / 2^k (an exact
power-of-two shift, so cross-class rescaling is an integer shift). The mask
costs 1 bit per channel; the channel-wise shift-select baseline it is compared
against needs 2 bits per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant import round_half_away

O2SF_MASK_BITS_PER_CHANNEL = 1
CHANNEL_SHIFT_BITS_PER_CHANNEL = 2


class O2sfError(ValueError):
    pass


@dataclass
class ChannelPartition:
    outlier_indices: list[int]
    normal_indices: list[int]
    threshold: float  # values strictly above it are outliers
    degenerate: bool = False  # all-equal input, outlier forced to the first argmax

    def mask(self, channels: int | None = None) -> np.ndarray:
        c = channels if channels is not None else len(self.outlier_indices) + len(
            self.normal_indices)
        m = np.zeros(c, dtype=bool)
        m[self.outlier_indices] = True
        return m


@dataclass(frozen=True)
class O2sfParams:
    outlier_mask: np.ndarray  # bool per channel, True = outlier
    scale_outlier: float  # s_o
    shift: int  # k >= 0, s_n = s_o / 2^k exactly
    bits: int

    def __post_init__(self):
        object.__setattr__(self, "outlier_mask", np.asarray(self.outlier_mask, dtype=bool))
        if self.shift < 0:
            raise O2sfError("shift must be non-negative")
        if not (self.scale_outlier > 0 and math.isfinite(self.scale_outlier)):
            raise O2sfError("scale_outlier must be positive and finite")
        if self.scale_normal * (1 << self.shift) != self.scale_outlier:
            raise O2sfError("s_n * 2^k must recover s_o bit-exactly")

    @property
    def scale_normal(self) -> float:
        return self.scale_outlier / (1 << self.shift)

    @property
    def channels(self) -> int:
        return int(self.outlier_mask.size)


def detect_outlier_channels(abs_max: np.ndarray) -> ChannelPartition:
    """Exact 1-D 2-means over per-channel absolute maxima.

    In one dimension the 2-means optimum is a threshold split, so the SSE
    argmin over the C-1 valid sorted splits IS the clustering objective's
    global solution (a plain Lloyd iteration can stall short of it). The
    higher cluster is the outlier set. All-equal inputs degenerate to a single
    forced outlier at the first argmax.
    """
    vals = np.asarray(abs_max, dtype=np.float64).ravel()
    c = vals.size
    if c < 2:
        raise O2sfError("need at least 2 channels")
    if vals.size and vals.min() < 0:
        raise O2sfError("absolute maxima must be non-negative")
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    if sv[0] == sv[-1]:
        top = int(np.argmax(vals))
        others = [i for i in range(c) if i != top]
        return ChannelPartition(outlier_indices=[top], normal_indices=others,
                                threshold=float(sv[0]), degenerate=True)
    csum = np.cumsum(sv)
    csum2 = np.cumsum(sv * sv)
    total, total2 = csum[-1], csum2[-1]
    best_split, best_sse = None, np.inf
    for i in range(1, c):
        if sv[i - 1] == sv[i]:  # equal values cannot straddle a threshold
            continue
        sl, sl2 = csum[i - 1], csum2[i - 1]
        sse = (sl2 - sl * sl / i) + ((total2 - sl2) - (total - sl) ** 2 / (c - i))
        if sse < best_sse:
            best_sse, best_split = sse, i
    outliers = sorted(int(i) for i in order[best_split:])
    normals = sorted(int(i) for i in order[:best_split])
    threshold = float((sv[best_split - 1] + sv[best_split]) / 2.0)
    return ChannelPartition(outlier_indices=outliers, normal_indices=normals,
                            threshold=threshold)


@dataclass
class O2sfQuantized:
    codes: np.ndarray  # int32, source shape
    params: O2sfParams
    channel_axis: int

    @property
    def shape(self):
        return self.codes.shape


def _channel_scales(p: O2sfParams) -> np.ndarray:
    return np.where(p.outlier_mask, p.scale_outlier, p.scale_normal)


def o2sf_quantize(t: np.ndarray, p: O2sfParams, channel_axis: int = -1) -> O2sfQuantized:
    """Per-element symmetric quantization with the channel's class scale."""
    t = np.asarray(t, dtype=np.float64)
    axis = channel_axis % t.ndim
    if t.shape[axis] != p.channels:
        raise O2sfError(
            f"tensor has {t.shape[axis]} channels on axis {axis}, mask has {p.channels}")
    shape = [1] * t.ndim
    shape[axis] = p.channels
    scales = _channel_scales(p).reshape(shape)
    lo, hi = -(1 << (p.bits - 1)), (1 << (p.bits - 1)) - 1
    codes = np.clip(round_half_away(t / scales), lo, hi).astype(np.int32)
    return O2sfQuantized(codes=codes, params=p, channel_axis=axis)


def o2sf_dequantize(q: O2sfQuantized) -> np.ndarray:
    shape = [1] * q.codes.ndim
    shape[q.channel_axis] = q.params.channels
    scales = _channel_scales(q.params).reshape(shape)
    return (q.codes.astype(np.float64) * scales).astype(np.float32)


def o2sf_qdq(t: np.ndarray, p: O2sfParams, channel_axis: int = -1) -> np.ndarray:
    return o2sf_dequantize(o2sf_quantize(t, p, channel_axis))


def shift_candidates(scale_outlier: float, max_shift: int) -> list[float]:
    """[s_o / 2^k for k in 0..max_shift] -- max_shift+1 exact halvings."""
    if not scale_outlier > 0:
        raise O2sfError("scale_outlier must be positive")
    if max_shift < 0:
        raise O2sfError("max_shift must be non-negative")
    return [scale_outlier / (1 << k) for k in range(max_shift + 1)]


def pack_mask(mask: np.ndarray) -> bytes:
    """Bit-pack a channel mask, channel 0 at the LSB of byte 0."""
    return np.packbits(np.asarray(mask, dtype=np.uint8), bitorder="little").tobytes()


def unpack_mask(packed: bytes, channels: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8),
                         count=channels, bitorder="little")
    return bits.astype(bool)


@dataclass
class ChannelShiftSelection:
    """Per-channel pick among halved scales {s/2^i | i=0..3} minimizing L2 error."""

    base_scale: float
    indices: np.ndarray  # 2-bit index per channel
    bits: int

    @property
    def scales(self) -> np.ndarray:
        return self.base_scale / (1 << self.indices.astype(np.int64))

    @property
    def overhead_bits_per_channel(self) -> int:
        return CHANNEL_SHIFT_BITS_PER_CHANNEL


def channelwise_shift_select(t: np.ndarray, base_scale: float, bits: int,
                             channel_axis: int = -1, num_indices: int = 4
                             ) -> ChannelShiftSelection:
    """For each channel, try s/2^i for i in 0..num_indices-1 and keep the L2 argmin.

    Ties go to the smaller index (coarser scale), making the selection
    evaluation-order independent.
    """
    t = np.asarray(t, dtype=np.float64)
    axis = channel_axis % t.ndim
    moved = np.moveaxis(t, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    channels = flat.shape[1]
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    errors = np.empty((num_indices, channels))
    for i in range(num_indices):
        s = base_scale / (1 << i)
        deq = np.clip(round_half_away(flat / s), lo, hi) * s
        errors[i] = np.sum((deq - flat) ** 2, axis=0)
    indices = np.argmin(errors, axis=0).astype(np.int8)  # argmin keeps the first tie
    return ChannelShiftSelection(base_scale=base_scale, indices=indices, bits=bits)
