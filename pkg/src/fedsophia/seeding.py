"""Seed derivation for independent, reproducible random streams.

A stream is identified by ``(master_seed, device_id, purpose)``. Each part is
folded in with a SplitMix64 finalizer, so adding devices or purposes never
shifts the streams that already exist.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# purpose tags; values are part of the reproducibility contract
INIT = 1
BATCHES = 2
GNB_LABELS = 3
SERVER = 4


def splitmix64(x):
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master, *parts):
    s = splitmix64(int(master) & MASK64)
    for p in parts:
        s = splitmix64(s ^ (int(p) & MASK64))
    return s


def stream(master, *parts):
    return np.random.default_rng(derive_seed(master, *parts))
