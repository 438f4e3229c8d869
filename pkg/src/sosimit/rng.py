"""Deterministic pseudo-random numbers for reproducible experiments.

Everything stochastic in this package (dataset sampling, noise, decision
variable initialization, minibatch selection) draws from the counter-based
generator below rather than from numpy's global state, so that a run is
reproducible bit-for-bit from its integer seed alone, independently of
library versions, call order elsewhere, or process count.

The generator is splitmix64: output ``i`` of a stream with seed ``s`` is
``mix64(s + (i + 1) * GAMMA)`` where ``GAMMA = 0x9E3779B97F4A7C15`` and
``mix64`` is the standard xor-shift/multiply finalizer.  Because outputs are
a pure function of (seed, counter), streams can be split and resumed freely.

Draw conventions (fixed; tests pin golden values):

* uniform doubles are ``(z >> 11) * 2**-53`` in ``[0, 1)``;
* gaussians come from Box-Muller on consecutive pairs ``(u1, u2)`` with
  ``u1 = 1 - U`` (so the log argument lies in ``(0, 1]``), emitted in the
  order ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)``; an odd request discards
  the trailing sine but still advances the counter by the full pair;
* ``normal(k)`` therefore always consumes ``2 * ceil(k / 2)`` raw outputs.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15

_U64_GAMMA = np.uint64(GAMMA)
_U64_S30 = np.uint64(30)
_U64_S27 = np.uint64(27)
_U64_S31 = np.uint64(31)
_U64_S11 = np.uint64(11)
_U64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_M2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG53 = 2.0 ** -53


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int (used for seed derivation)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *salts: int) -> int:
    """Derive a child seed from a parent seed and integer salts.

    child = mix64(parent ^ mix64(salt)), folded left over the salts.  Used by
    the experiment layer to give every (seed, n_samples, purpose) combination
    its own independent stream regardless of execution order.
    """
    s = seed & _MASK64
    for salt in salts:
        s = mix64(s ^ mix64(salt))
    return s


class SplitMix64:
    """Counter-based splitmix64 stream with numpy-vectorized draws."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"SplitMix64(seed={self.seed:#x}, counter={self.counter})"

    def derive(self, *salts: int) -> "SplitMix64":
        """Fresh stream whose seed is derived from this stream's seed."""
        return SplitMix64(derive_seed(self.seed, *salts))

    def raw(self, count: int) -> np.ndarray:
        """Next ``count`` raw 64-bit outputs, advancing the counter."""
        if count < 0:
            raise ValueError("count must be nonnegative")
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _U64_GAMMA
            z = (z ^ (z >> _U64_S30)) * _U64_M1
            z = (z ^ (z >> _U64_S27)) * _U64_M2
            z = z ^ (z >> _U64_S31)
        return z

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``count`` uniform doubles in ``[low, high)``."""
        u = (self.raw(count) >> _U64_S11).astype(np.float64) * _TWO_NEG53
        return low + (high - low) * u

    def normal(self, count: int, scale: float = 1.0) -> np.ndarray:
        """``count`` N(0, scale^2) doubles via Box-Muller pairs."""
        pairs = (count + 1) // 2
        u = (self.raw(2 * pairs) >> _U64_S11).astype(np.float64) * _TWO_NEG53
        u1 = 1.0 - u[0::2]  # in (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return scale * out[:count]
