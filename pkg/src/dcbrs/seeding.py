"""Named, order-independent random sub-streams derived from one run seed.

``sub_rng(seed, "retention")`` and ``sub_rng(seed, "policy", "victim")`` are
independent generators keyed by name, so adding a consumer (say a new policy)
never shifts the draws seen by another (say the dataset builder).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))


def sub_rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))


def run_seed(master_seed: int, run_index: int) -> int:
    """Per-run seed; a 63-bit integer so it can be echoed in reports."""
    state = seed_sequence(master_seed, "run", run_index).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
