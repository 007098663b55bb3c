"""Counter-based RNG streams keyed by integer tuples.

Every random draw in the package comes from ``make_rng(seed, *keys)`` so
that a stream depends only on its key, never on call history.  This is what
makes resumed runs bit-exact.
"""

import numpy as np

# stream tags
SAMPLE = 1
SHUFFLE = 2
VMC = 3
EVAL = 4
INIT = 5


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed), *map(int, keys)]
    if any(k < 0 for k in entropy):
        raise ValueError(f"seeds and stream keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
