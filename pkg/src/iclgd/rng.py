"""Keyed random streams.

Every random draw in the package comes from a PCG64 generator whose
SeedSequence is built from the user seed plus an integer key path, so a
(seed, key) pair always yields the same numbers on a given build and
distinct keys yield independent streams.
"""

import numpy as np

# first element of every key path; keeps subsystems from sharing streams
DESIGN = 1
TASK = 2
REPLICATE_BLOCK = 3
IDENTITY_DRAW = 4
IDENTITY_INPUT = 5
PILOT = 6


def generator(seed, *key):
    if seed is None or int(seed) < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
