"""IEEE-754 binary32 bit manipulation and bit-range partitions.

Bit numbering follows the machine word: bit 0 is the least-significant
mantissa bit, bits 0..22 are the mantissa, bits 23..30 the biased exponent,
bit 31 the sign. Flips may produce NaN/inf; they propagate downstream by
IEEE semantics (no sanitization here).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

WORD_BITS = 32
SIGN_BIT = 31
EXPONENT_BITS = tuple(range(23, 31))
MANTISSA_BITS = tuple(range(0, 23))
ALL_BITS = tuple(range(32))


class Granularity(Enum):
    """Which bits of a 32-bit word a fault target spans."""

    ELEMENT = "element"
    EXPONENT = "exponent"
    MANTISSA = "mantissa"
    BIT = "bit"

    @property
    def bit_count(self) -> int:
        return {"element": 32, "exponent": 8, "mantissa": 23, "bit": 1}[self.value]


def bits_of(granularity: Granularity, anchor: int | None = None) -> tuple[int, ...]:
    """Return the bit indices a target of this granularity covers.

    ``anchor`` must be supplied iff granularity is BIT.
    """
    if granularity is Granularity.BIT:
        if anchor is None:
            raise ValueError("BIT granularity requires an anchor bit")
        if not 0 <= anchor < WORD_BITS:
            raise ValueError(f"anchor bit {anchor} outside [0, 31]")
        return (anchor,)
    if anchor is not None:
        raise ValueError(f"{granularity.value} granularity takes no anchor bit")
    if granularity is Granularity.ELEMENT:
        return ALL_BITS
    if granularity is Granularity.EXPONENT:
        return EXPONENT_BITS
    return MANTISSA_BITS


def check_bit(loc: int) -> int:
    if not isinstance(loc, (int, np.integer)) or isinstance(loc, bool):
        raise TypeError(f"bit index must be an integer, got {loc!r}")
    if not 0 <= loc < WORD_BITS:
        raise ValueError(f"bit index {loc} outside [0, 31]")
    return int(loc)


def flip_bit(word: float | np.float32, loc: int) -> np.float32:
    """Flip exactly one bit of a binary32 word, returning the new word."""
    loc = check_bit(loc)
    u = np.float32(word).view(np.uint32) ^ np.uint32(1 << loc)
    return np.uint32(u).view(np.float32)


def flip_in_array(arr: np.ndarray, flat_index: int, loc: int) -> None:
    """Flip one bit of one element of a float32 array, in place."""
    loc = check_bit(loc)
    if arr.dtype != np.float32 or not arr.flags.c_contiguous:
        raise ValueError("flip_in_array needs a C-contiguous float32 array")
    view = arr.reshape(-1).view(np.uint32)
    view[flat_index] ^= np.uint32(1 << loc)


def word_bits(word: float | np.float32) -> int:
    """The raw 32-bit pattern of a binary32 word, as a Python int."""
    return int(np.float32(word).view(np.uint32))
