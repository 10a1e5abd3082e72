"""Named, counter-based random streams.

Every random quantity in the package is drawn from a Philox generator keyed
by ``(root seed, stream name, index)``.  Two draws with the same key are
identical regardless of the order in which streams are created, which is what
keeps sample ``j`` reproducible when samples are processed in any order.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "streams"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return the generator for substream ``name`` / ``index`` of ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def streams(seed: int, name: str, count: int, start: int = 0) -> list[np.random.Generator]:
    return [stream(seed, name, start + j) for j in range(count)]
