"""Keyed random streams.

Every random draw in an attack is taken from a numpy Generator whose seed is
derived from (master seed, *key parts) through a SplitMix64 chain. A stream is
addressed by its key, not by how many draws happened before it, so turning a
component off never shifts the draws seen by another component.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15

# purpose ids, stable across versions
CFM_ACTIVATION = 1
CFM_PERMUTATION = 2
CFM_ALPHA = 3
DI = 10
RDI = 11
ADMIX = 12
VT = 13
TARGETS = 20
SYNTH = 21
SHUFFLE = 22
INIT = 23
STRATIFY = 24


def splitmix64(z: int) -> int:
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *parts: int) -> int:
    """Fold integer key parts into a 64-bit seed."""
    h = splitmix64(int(seed) & MASK64)
    for p in parts:
        h = splitmix64(h ^ (int(p) & MASK64))
    return h


def stream(seed: int, *parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts)))
