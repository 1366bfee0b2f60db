"""Named deterministic random streams.

Every source of randomness in a run is a dedicated stream keyed by the master
seed, a stream tag, and optional indices (client, round, method slot). Streams
are independent of each other and of the order in which they are opened, so
per-(client, round) sample draws are identical across methods and across any
parallel execution schedule.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are part of the reproducibility contract: changing them
# changes every run's draws.
SHARDS = 1
VALIDATION = 2
MIXTURE_DIRECTION = 3
BATCH = 4
ATTACK_NOISE = 5
MD = 6
METHOD = 7
TEST_SET = 8


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Return the generator for one named stream.

    The same (master_seed, key) always yields an identical generator state.
    """
    entropy = (int(master_seed),) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))


def unit_sphere_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Draw a vector uniformly from the unit Euclidean sphere."""
    v = rng.standard_normal(dim)
    norm = float(np.linalg.norm(v))
    while norm == 0.0:  # probability zero, defensive only
        v = rng.standard_normal(dim)
        norm = float(np.linalg.norm(v))
    return v / norm
