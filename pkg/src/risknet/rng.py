"""Seeded random streams.

Every stochastic stage takes an explicit ``numpy.random.Generator``. Child
streams are derived from a root seed plus an integer path (e.g. topology
index, year block) with ``SeedSequence``, so results never depend on how
work is scheduled across processes.
"""

import numpy as np


def stream(seed, *path):
    """Independent Philox generator for ``(seed, *path)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def unit_open_zero(rng, size=None):
    """Uniform draw on (0, 1]; safe as argument of ``log`` and negative powers."""
    return 1.0 - rng.random(size)
