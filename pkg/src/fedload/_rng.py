"""Seed derivation. Every random stream is keyed by explicit integers."""

import numpy as np

# stream tags keep independent draws with the same (seed, ...) key apart
SHUFFLE = 1
NOISE = 2
SELECT = 3
INIT = 4
PAIR = 5
SYNTH = 6


def derive_rng(*key):
    """Return a PCG64 generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def derive_seed(*key):
    """Collapse a key tuple into a single 64-bit seed."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
