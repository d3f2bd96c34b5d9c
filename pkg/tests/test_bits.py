import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glitchsim.bits import (
    ALL_BITS,
    EXPONENT_BITS,
    MANTISSA_BITS,
    SIGN_BIT,
    Granularity,
    bits_of,
    flip_bit,
    flip_in_array,
    word_bits,
)

words = st.integers(min_value=0, max_value=2**32 - 1)
bit_locs = st.integers(min_value=0, max_value=31)


def from_pattern(pattern: int) -> np.float32:
    return np.uint32(pattern).view(np.float32)


def test_sign_flip_of_one():
    assert flip_bit(1.0, 31) == np.float32(-1.0)


def test_exponent_flip_reaches_infinity():
    # independent reference decoder: struct on the raw pattern
    one = struct.unpack("<I", struct.pack("<f", 1.0))[0]
    assert one == 0x3F800000
    flipped = flip_bit(from_pattern(one), 30)
    assert word_bits(flipped) == 0x7F800000
    assert struct.unpack("<f", struct.pack("<I", 0x7F800000))[0] == float("inf")
    assert np.isposinf(flipped)


@given(words, bit_locs)
def test_involution(pattern, loc):
    v = from_pattern(pattern)
    assert word_bits(flip_bit(flip_bit(v, loc), loc)) == pattern


@given(words, bit_locs)
def test_single_bit_hamming_distance(pattern, loc):
    flipped = word_bits(flip_bit(from_pattern(pattern), loc))
    assert bin(flipped ^ pattern).count("1") == 1


def test_bit_index_bounds():
    with pytest.raises(ValueError):
        flip_bit(1.0, 32)
    with pytest.raises(ValueError):
        flip_bit(1.0, -1)
    with pytest.raises(TypeError):
        flip_bit(1.0, 1.5)


def test_flip_in_array_matches_scalar_flip():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    flip_in_array(arr, 4, 30)
    assert arr[1, 1] == flip_bit(np.float32(4.0), 30)
    with pytest.raises(ValueError):
        flip_in_array(arr.astype(np.float64), 0, 0)


def test_granularity_bit_sets():
    assert bits_of(Granularity.EXPONENT) == tuple(range(23, 31))
    assert len(bits_of(Granularity.EXPONENT)) == 8
    assert bits_of(Granularity.MANTISSA) == tuple(range(0, 23))
    assert len(bits_of(Granularity.MANTISSA)) == 23
    assert bits_of(Granularity.ELEMENT) == tuple(range(32))
    assert bits_of(Granularity.BIT, anchor=5) == (5,)


def test_granularity_cardinality_matches_bit_count():
    for g in (Granularity.ELEMENT, Granularity.EXPONENT, Granularity.MANTISSA):
        assert len(bits_of(g)) == g.bit_count
    assert len(bits_of(Granularity.BIT, anchor=0)) == Granularity.BIT.bit_count


def test_partition_of_the_word():
    union = set(EXPONENT_BITS) | set(MANTISSA_BITS) | {SIGN_BIT}
    assert union == set(ALL_BITS)
    assert not set(EXPONENT_BITS) & set(MANTISSA_BITS)
    assert SIGN_BIT not in EXPONENT_BITS and SIGN_BIT not in MANTISSA_BITS


def test_anchor_rules():
    with pytest.raises(ValueError):
        bits_of(Granularity.BIT)
    with pytest.raises(ValueError):
        bits_of(Granularity.ELEMENT, anchor=3)
    with pytest.raises(ValueError):
        bits_of(Granularity.BIT, anchor=32)
