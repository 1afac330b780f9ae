"""Deterministic derivation of child seeds from integer key tuples."""

from __future__ import annotations

import numpy as np

__all__ = ["child_seed"]


def child_seed(*key: int) -> int:
    """Fold an integer key tuple into a reproducible 64-bit seed."""
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]).generate_state(2)
    return int(state[0]) << 32 | int(state[1])
