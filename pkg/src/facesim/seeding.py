"""Named random substreams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, name, *keys); call order never matters."""
    entropy = [int(seed), stream_key(name), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**62))
