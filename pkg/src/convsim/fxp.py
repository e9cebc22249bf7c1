"""Fixed-point formats and saturating arithmetic for the conv datapath.

Values are carried as plain Python ints (or numpy integer arrays) holding
the raw two's-complement pattern:

  * Fx16  -- 16-bit word interpreted as Q8.8 (8 integer bits incl. sign,
             8 fraction bits).  Range [-128.0, +127.99609375].
  * Acc48 -- 48-bit accumulator with 16 fraction bits.  A product of two
             Fx16 values fits in 31 bits, so summing up to 2^16 products
             stays below 2^47 and accumulation order never matters.

All rounding is round-to-nearest-even.  quantize() is the only lossy step.
"""

import numpy as np

FRAC_BITS = 8
ACC_FRAC_BITS = 16

FX_ONE = 1 << FRAC_BITS
FX_MIN = -(1 << 15)
FX_MAX = (1 << 15) - 1

ACC_ONE = 1 << ACC_FRAC_BITS
# acc_add faults once a magnitude no longer fits in 47 bits + sign
ACC_LIMIT = 1 << 47


class SimulationFault(Exception):
    """An in-contract invariant was violated during simulation."""


def to_fx(x):
    """Round a real number to the nearest Q8.8 word, saturating."""
    if not np.isfinite(x):
        raise ValueError("fixed-point conversion needs a finite value")
    v = round(x * FX_ONE)  # Python round() is round-half-to-even
    return max(FX_MIN, min(FX_MAX, v))


def to_real(v):
    """Value of a Q8.8 word as a float."""
    return v / FX_ONE


def fx_bits(v):
    """Unsigned 16-bit pattern of a Q8.8 word (for display/tests)."""
    return v & 0xFFFF


def from_bits(bits):
    """Signed Q8.8 word from an unsigned 16-bit pattern."""
    bits &= 0xFFFF
    return bits - 0x10000 if bits >= 0x8000 else bits


def fx_mul(a, b):
    """Exact product of two Q8.8 words as an Acc48 value (16 fraction bits)."""
    return a * b


def acc_from_fx(v):
    """Widen a Q8.8 word to Acc48 (e.g. bias injection)."""
    return v << (ACC_FRAC_BITS - FRAC_BITS)


def acc_add(a, b):
    """Exact accumulator sum; faults if the result leaves the 48-bit format."""
    s = a + b
    if s >= ACC_LIMIT or s < -ACC_LIMIT:
        raise SimulationFault(
            "accumulator overflow: |%d| exceeds 47 bits (layer out of contract)" % s
        )
    return s


def quantize(acc):
    """Drop 8 fraction bits of an Acc48 value (round-to-nearest-even), saturate to Fx16."""
    q = acc >> FRAC_BITS
    r = acc & (FX_ONE - 1)
    if r > FX_ONE // 2 or (r == FX_ONE // 2 and (q & 1)):
        q += 1
    return max(FX_MIN, min(FX_MAX, q))


def quantize_array(acc):
    """Vector quantize: int64 accumulators -> int16 Q8.8 words, bit-identical to quantize()."""
    acc = np.asarray(acc, dtype=np.int64)
    q = acc >> FRAC_BITS
    r = acc & (FX_ONE - 1)
    half = FX_ONE // 2
    q = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
    return np.clip(q, FX_MIN, FX_MAX).astype(np.int16)


def to_fx_array(x):
    """Vector to_fx: float array -> int16 Q8.8 words (round-half-to-even, saturating)."""
    v = np.rint(np.asarray(x, dtype=np.float64) * FX_ONE)
    return np.clip(v, FX_MIN, FX_MAX).astype(np.int16)


def check_acc_range(acc):
    """Fault if any accumulator in the array left the 48-bit format."""
    acc = np.asarray(acc)
    if acc.size and int(np.abs(acc).max()) >= ACC_LIMIT:
        raise SimulationFault("accumulator overflow in vectorized path")
