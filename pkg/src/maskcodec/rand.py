"""Deterministic seed derivation.

All randomness in the package flows through explicit seeds; substreams are
derived from integer tuples so that (seed, epoch, step, ...) always maps to
the same generator on every host.
"""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of non-negative ints into one 64-bit seed."""
    words = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2)
    return int(words[0]) | (int(words[1]) << 32)


def rng_from(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))
