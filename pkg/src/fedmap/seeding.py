"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np

STREAMS = ("encoder", "init", "tasks", "routes", "data")


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a generator that depends only on ``(root_seed, name, *extra)``.

    The name is hashed with CRC32 so the mapping is stable across processes
    and Python versions (unlike ``hash``).
    """
    key = [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
