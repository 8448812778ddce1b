"""Pinned deterministic seeding primitives.

Every source of randomness in the engine flows through two primitives that
are fixed here so reruns (and the response cache) are bit-stable across
processes and platforms:

- ``stable_hash64(*parts)``: SHA-256 over the parts joined with an ASCII
  unit separator (0x1f), truncated to the first 8 bytes interpreted
  big-endian. Used to derive per-round instance seeds from
  (global_seed, caption_id, round_index, question_id).
- ``SplitMix64``: the standard splitmix64 generator (Steele et al.),
  used to drive option shuffles and plan draws. Fisher-Yates runs
  descending: for i = n-1 .. 1, j = next() % (i + 1), swap(i, j).

The modulo step has negligible bias for the option counts involved
(n <= 8 against a 64-bit stream).
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_SEP = b"\x1f"


def stable_hash64(*parts: object) -> int:
    """64-bit stable hash of the stringified parts (SHA-256 truncation)."""
    payload = _SEP.join(str(p).encode("utf-8") for p in parts)
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big")


class SplitMix64:
    """splitmix64 PRNG; deterministic for a given 64-bit seed."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform-ish draw in [0, n); n must be positive."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n


def permutation(n: int, seed: int) -> list[int]:
    """Seeded Fisher-Yates permutation of range(n), descending swap order."""
    rng = SplitMix64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
