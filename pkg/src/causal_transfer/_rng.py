"""Seed plumbing.

Every random stream in the package is derived from a master seed plus a tuple
of keys, so that a stage, trial or episode always sees the same stream no
matter what else ran before it.
"""
import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def substream(seed, *keys):
    """Return a Generator determined only by ``seed`` and ``keys``.

    String keys are hashed with CRC32 so the mapping is stable across
    interpreter runs (unlike ``hash``).
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(
            entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(_key(k) for k in keys)
        )
    else:
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(ss)


def check_random_state(random_state):
    """Turn ``None``, an int or a Generator into a Generator."""
    if random_state is None:
        return np.random.default_rng()
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(int(random_state))
    raise TypeError(f"cannot build a Generator from {random_state!r}")


def seed_from(random_state):
    """Draw a 63-bit integer seed, used to key per-episode substreams."""
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    rng = check_random_state(random_state)
    return int(rng.integers(0, 2**63 - 1))
