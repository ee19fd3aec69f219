"""Deterministic random streams.

Every stream is a xoshiro256** generator whose 256-bit state is expanded from a
64-bit seed with splitmix64, wrapped in a numpy ``Generator`` so the usual
distribution methods are available. The bit stream is identical on every
platform; distribution transforms are those of the installed numpy.
"""

from __future__ import annotations

import hashlib

import numpy as np
from randomgen import Xoshiro256

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def xoshiro_state(seed: int) -> np.ndarray:
    s = seed & _MASK64
    words = []
    for _ in range(4):
        s, out = splitmix64(s)
        words.append(out)
    return np.array(words, dtype=np.uint64)


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a generator whose stream depends only on ``seed`` (mod 2**64).

    Seed 0 is fine: splitmix64 never yields an all-zero xoshiro state.
    """
    bitgen = Xoshiro256()
    bitgen.state = {
        "bit_generator": bitgen.state["bit_generator"],
        "s": xoshiro_state(int(seed)),
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bitgen)


def derive_seed(seed: int, *keys: object) -> int:
    """Stable 64-bit child seed for ``(seed, *keys)``; keys must have stable reprs."""
    payload = repr((int(seed) & _MASK64,) + tuple(keys)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
