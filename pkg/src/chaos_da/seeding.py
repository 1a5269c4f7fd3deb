"""Deterministic RNG stream derivation. Every stream is keyed by integers only."""
from __future__ import annotations

import numpy as np

# stream tags
TWIN_REFERENCE = 1
TWIN_NOISE = 2
ROLLOUT_ACTIONS = 3
ROLLOUT_ENV = 4
MINIBATCH = 5
ACTOR_INIT = 6
CRITIC_INIT = 7
RL_MEMBER = 8
ENKF_INIT = 9
ENKF_FORECAST = 10
ENKF_ANALYSIS = 11
REPETITION = 12
SIMULATE = 13


def _entropy(keys) -> list[int]:
    out = []
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"seed keys must be non-negative, got {k}")
        out.append(k)
    return out


def make_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(keys))))


def derive_seed(*keys: int) -> int:
    """A 63-bit integer seed for the stream identified by ``keys``."""
    lo, hi = np.random.SeedSequence(_entropy(keys)).generate_state(2, np.uint32)
    return int((int(hi) << 32 | int(lo)) & (2**63 - 1))
