"""Deterministic random-stream derivation.

All randomness in the package flows through `stream`, which derives an
independent generator from a root seed plus a tuple of integer/string keys.
Streams are stateless functions of their keys, so any step of a run can be
reproduced (or resumed) without replaying the steps before it, and results
never depend on evaluation order or worker count.
"""

from __future__ import annotations

import numpy as np

_STR_MOD = 2**63 - 25  # large prime; folds string keys into the entropy tuple


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be nonnegative, got {key}")
        return int(key)
    h = 2166136261
    for ch in key.encode("utf-8"):  # FNV-1a, stable across runs unlike hash()
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFFFFFFFFFF
    return h % _STR_MOD


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a generator for the stream identified by (seed, *keys)."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
