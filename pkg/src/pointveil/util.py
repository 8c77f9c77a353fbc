"""Small shared helpers: seeded RNG streams, checksums, atomic writes."""

from __future__ import annotations

import hashlib
import os
import zlib

import numpy as np


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    """Independent RNG stream derived from a base seed plus context tags.

    Tags (strings or ints) are folded into the seed sequence so parallel
    call sites never share a stream.
    """
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    entropy = [int(seed)] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def array_checksum(arrays) -> str:
    """SHA-256 over the raw bytes of an iterable of named arrays."""
    h = hashlib.sha256()
    for name, arr in arrays:
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
