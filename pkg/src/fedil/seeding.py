"""Keyed seed derivation.

Randomness is never drawn from a shared stateful generator: each consumer
derives its own seed from ``(root seed, purpose tag, indices...)``, so adding
or skipping one consumer cannot shift another's stream.
"""

import numpy as np

SELECT = 1
SERVER = 2
CLIENT_EPOCH = 3
CREDIBILITY = 4
INIT = 5
PSEUDO = 6


def derive_seed(root: int, tag: int, *indices: int) -> int:
    state = np.random.SeedSequence([int(root), int(tag), *map(int, indices)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def derive_rng(root: int, tag: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag, *indices))
