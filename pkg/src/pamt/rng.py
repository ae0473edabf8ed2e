"""Deterministic, order-independent random stream derivation.

Every component derives its own generator from (seed, string tags), so
parallel and serial execution of per-bag work agree bit-exactly and adding a
consumer never shifts another component's stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """A named PCG64 stream for ``seed`` and a tag path.

    Tags may be ints or strings; strings are folded in via CRC32 so the
    entropy is stable across processes and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-style normal initialization with std sqrt(2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in)), size=shape)
