import numpy as np
import pytest

from twoscale.v2sf import (KIND_GELU, KIND_SOFTMAX, DEFAULT_SHIFT, V2sfError, V2sfParams,
                           canonical_codes, codes_to_words, distinct_levels,
                           encoded_from_codes, integer_levels, load_v2sf, payload_words,
                           save_v2sf, twin_region_encode, v2sf_bits_per_element,
                           v2sf_decode, v2sf_decode_levels, v2sf_encode, v2sf_qdq,
                           words_to_codes)

S6 = V2sfParams(kind=KIND_SOFTMAX, bits=6, shift=4, scale_small=0.001)
G6 = V2sfParams(kind=KIND_GELU, bits=6, shift=3, scale_small=0.01)


def levels_of(t, p):
    return v2sf_decode_levels(np.asarray(t, dtype=np.float64), p)


def test_default_shifts():
    assert DEFAULT_SHIFT[KIND_SOFTMAX] == 4
    assert DEFAULT_SHIFT[KIND_GELU] == 3


def test_softmax_b6_hand_examples():
    s = S6.scale_small
    # below-threshold identity
    assert levels_of([31 * s], S6).tolist() == [31]
    # first truncated bit rounds: 40/16 = 2.5 -> stored 3 -> level 48
    assert levels_of([40 * s], S6).tolist() == [48]
    # extended max clamps the coarse code: round(511/16)=32 -> 31 -> level 496
    assert levels_of([511 * s], S6).tolist() == [496]
    assert levels_of([10000 * s], S6).tolist() == [496]


def test_gelu_b6_hand_examples():
    s = G6.scale_small
    assert levels_of([-9 * s], G6).tolist() == [-9]
    # divisible case decodes exactly: 200/8 = 25 -> 200
    assert levels_of([200 * s], G6).tolist() == [200]
    # positivity rule: deep negatives clamp into the small region
    assert levels_of([-20 * s], G6).tolist() == [-15]


def test_softmax_b8_generalization():
    p = V2sfParams(kind=KIND_SOFTMAX, bits=8, shift=4, scale_small=0.001)
    assert p.extended_bits == 11
    assert p.small_threshold == 128
    assert levels_of([130 * p.scale_small], p).tolist() == [128]
    assert levels_of([127 * p.scale_small], p).tolist() == [127]


def test_bits_per_element():
    assert v2sf_bits_per_element(S6) == 6
    assert v2sf_bits_per_element(G6) == 6
    assert v2sf_bits_per_element(
        V2sfParams(kind=KIND_GELU, bits=8, shift=3, scale_small=1.0)) == 8


def test_structural_constants_b6():
    assert S6.extended_bits == 9  # 9-bit initial quantization
    assert S6.small_threshold == 32  # split at 2^5
    assert S6.small_code_bits == 5  # five stored value bits
    assert G6.small_threshold == 16  # gelu split at 2^4 on magnitudes
    assert G6.small_code_bits == 4  # sign + 4 magnitude bits
    assert G6.extended_min == -15


def test_payload_bit_budget():
    rng = np.random.default_rng(0)
    for bits in (4, 6, 8):
        for params in (V2sfParams(kind=KIND_SOFTMAX, bits=bits, shift=4, scale_small=0.01),
                       V2sfParams(kind=KIND_GELU, bits=bits, shift=3, scale_small=0.01)):
            for count in (0, 1, 7, 64, 197):
                t = rng.uniform(0, 3, count)
                if params.kind == KIND_GELU:
                    t = t - 0.2
                e = v2sf_encode(t, params)
                assert len(e.payload) == (bits * count + 7) // 8


def test_encode_decode_encode_is_encode():
    rng = np.random.default_rng(1)
    for params in (S6, G6, V2sfParams(kind=KIND_SOFTMAX, bits=8, shift=4, scale_small=0.003),
                   V2sfParams(kind=KIND_GELU, bits=8, shift=3, scale_small=0.002)):
        t = rng.uniform(0, 1, 500)
        if params.kind == KIND_GELU:
            t = t - 0.17  # a realistic negative tail
        e1 = v2sf_encode(t, params)
        e2 = v2sf_encode(v2sf_decode(e1), params)
        assert e1.payload == e2.payload


def test_all_zero_tensor():
    e = v2sf_encode(np.zeros(10), S6)
    assert v2sf_decode(e).tolist() == [0.0] * 10
    assert np.all(payload_words(e) == 0)  # region bits are zero too


def test_canonical_code_round_trip_all_widths():
    for bits in (4, 6, 8):
        for kind in (KIND_SOFTMAX, KIND_GELU):
            p = V2sfParams(kind=kind, bits=bits,
                           shift=DEFAULT_SHIFT[kind], scale_small=0.01)
            triples = canonical_codes(p)
            region, sign, stored = (np.array(x) for x in zip(*triples))
            enc = encoded_from_codes(region, sign, stored, p)
            re_enc = v2sf_encode(v2sf_decode(enc), p)
            assert enc.payload == re_enc.payload


def test_monotone_decode_softmax():
    full = np.arange(0, S6.extended_max + 1)
    lv = levels_of(full * S6.scale_small, S6)
    assert np.all(np.diff(lv) >= 0)


def test_error_bounds():
    rng = np.random.default_rng(2)
    p = S6
    s = p.scale_small
    # the last extended code that does not clamp the coarse code
    max_unclamped = p.stored_max * (1 << p.shift) + (1 << (p.shift - 1)) - 1
    # on-grid values: recoding error bounded by 2^(m-1) * s_s
    grid_vals = np.arange(p.small_threshold, max_unclamped + 1) * s
    err = np.abs(levels_of(grid_vals, p) * s - grid_vals)
    assert err.max() <= (1 << (p.shift - 1)) * s + 1e-12
    # small region arbitrary values: half a fine step
    small = rng.uniform(0, (p.small_threshold - 1) * s, 300)
    err_small = np.abs(levels_of(small, p) * s - small)
    assert err_small.max() <= s / 2 + 1e-12
    # arbitrary unclamped large values: half-step of initial rounding on top
    large = rng.uniform(p.small_threshold * s, max_unclamped * s, 300)
    err_large = np.abs(levels_of(large, p) * s - large)
    assert err_large.max() <= ((1 << (p.shift - 1)) + 0.5) * s + 1e-12


def test_negative_softmax_rejected():
    with pytest.raises(V2sfError):
        v2sf_encode(np.array([-0.1]), S6)


def test_params_validation():
    with pytest.raises(V2sfError):
        V2sfParams(kind="relu", bits=6, shift=4, scale_small=1.0)
    with pytest.raises(V2sfError):
        V2sfParams(kind=KIND_SOFTMAX, bits=3, shift=2, scale_small=1.0)
    with pytest.raises(V2sfError):
        V2sfParams(kind=KIND_SOFTMAX, bits=6, shift=0, scale_small=1.0)
    with pytest.raises(V2sfError):
        V2sfParams(kind=KIND_SOFTMAX, bits=6, shift=4, scale_small=0.0)
    with pytest.raises(V2sfError):  # coarse region would start past reach
        V2sfParams(kind=KIND_GELU, bits=6, shift=6, scale_small=1.0)
    with pytest.raises(V2sfError):  # 32-bit intermediate budget
        V2sfParams(kind=KIND_SOFTMAX, bits=16, shift=16, scale_small=1.0)


def test_scale_large_relation_exact():
    for m in (1, 3, 4, 6):
        p = V2sfParams(kind=KIND_SOFTMAX, bits=8, shift=m, scale_small=0.37)
        assert p.scale_large == p.scale_small * (1 << m)
        assert p.scale_large / (1 << m) == p.scale_small  # exact binary relation


def test_word_layout_round_trip():
    p = G6
    region = np.array([0, 0, 1])
    sign = np.array([0, 1, 0])
    stored = np.array([5, 9, 25])
    words = codes_to_words(region, sign, stored, p)
    r2, s2, st2 = words_to_codes(words, p)
    assert r2.tolist() == region.tolist()
    assert s2.tolist() == sign.tolist()
    assert st2.tolist() == stored.tolist()
    # MSB layout: region-1 word has the top bit set
    assert words[2] >> (p.bits - 1) == 1
    # sign sits just below the region bit in the small layout
    assert (words[1] >> (p.bits - 2)) & 1 == 1


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    t = rng.uniform(0, 0.5, (4, 9))
    e = v2sf_encode(t, S6)
    path = tmp_path / "t.v2sf"
    save_v2sf(e, path)
    loaded = load_v2sf(path)
    assert loaded.shape == (4, 9)
    assert loaded.payload == e.payload
    assert loaded.params == V2sfParams(kind=KIND_SOFTMAX, bits=6, shift=4,
                                       scale_small=float(np.float32(0.001)))
    assert np.array_equal(integer_levels(loaded), integer_levels(e))

    raw = bytearray(path.read_bytes())
    raw[4] = 9  # bogus version
    bad = tmp_path / "bad.v2sf"
    bad.write_bytes(bytes(raw))
    with pytest.raises(V2sfError):
        load_v2sf(bad)


def test_payload_length_mismatch():
    e = v2sf_encode(np.zeros(10), S6)
    with pytest.raises(V2sfError):
        type(e)(shape=(11,), payload=e.payload, params=e.params)


def test_distinct_level_count():
    # 2^(b-1) fine levels plus the coarse ones, some overlapping
    for p in (S6, V2sfParams(kind=KIND_SOFTMAX, bits=8, shift=4, scale_small=1.0)):
        lv = distinct_levels(p)
        assert lv.size <= (1 << (p.bits - 1)) + (1 << (p.bits - 1))


# --- fixed twin-region baseline ---

def test_twin_region_softmax_fixed_scale():
    enc = twin_region_encode(np.array([0.1, 0.5]), KIND_SOFTMAX, 6, 4)
    assert enc.scale_r2 == 1.0 / 32
    assert enc.scale_r1 == 1.0 / 512


def test_twin_region_bin_waste_at_low_max():
    # a dense ramp up to 0.56 can reach at most ceil(0.56*32)=18 of the 32 bins
    t = np.linspace(0.0, 0.56, 5000)
    enc = twin_region_encode(t, KIND_SOFTMAX, 6, 4)
    occupied, total = enc.region2_bin_occupancy()
    assert total == 32
    assert occupied <= 18


def test_twin_region_pure_fine_region():
    t = np.linspace(0, 1 / 32, 7, endpoint=False)[:4] * 0.9  # all below 2^(b-1)*s_r1
    enc = twin_region_encode(t, KIND_SOFTMAX, 6, 4)
    assert np.all(enc.region == 0)


def test_twin_region_gelu_sign_split():
    t = np.array([-0.3, -0.01, 0.0, 0.2, 1.4])
    enc = twin_region_encode(t, KIND_GELU, 6, 3)
    assert enc.region.tolist() == [0, 0, 1, 1, 1]
    assert enc.codes[0] <= 0 and enc.codes[4] > 0
    dec = enc.decode()
    assert dec[2] == 0.0
    r1, r2 = enc.as_quantized_pair()
    assert r1.params.scale * (1 << 3) == r2.params.scale
