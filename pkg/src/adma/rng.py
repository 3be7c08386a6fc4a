"""Counter-based random streams keyed by ``(seed, stream name, index...)``.

Every consumer of randomness asks for its own stream, so a subsystem can be
replayed in isolation without advancing anybody else's generator.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def stream_key(seed: int, name: str, *index: int) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<q", int(seed)))
    h.update(name.encode("utf-8"))
    for i in index:
        h.update(struct.pack("<q", int(i)))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return a fresh Philox generator for the given key."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, *index)))


def derive_seed(seed: int, name: str, *index: int) -> int:
    """Derive a child integer seed (63 bits) from a key."""
    return stream_key(seed, name, *index) & ((1 << 63) - 1)
