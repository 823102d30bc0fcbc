"""
Deterministic random streams.

Streams are Philox (counter-based) generators keyed by a SHA-256 digest of
``(root_seed, label)``, so the same pair yields the same sequence on every
platform and unrelated labels never share state. ``ItemStream`` derives one
generator per item index, which keeps per-item draws independent of batch
size and worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(root_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root_seed)}\x1f{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def seeded_rng(root_seed: int, stream_label: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(root_seed, stream_label)))


def derive_seed(root_seed: int, label: str) -> int:
    """A 63-bit integer seed derived from (root_seed, label)."""
    return _key(root_seed, label) & ((1 << 63) - 1)


class ItemStream:
    """An infinite sequence of items, each with its own generator."""

    def __init__(self, root_seed: int, label: str, start: int = 0):
        self.root_seed = int(root_seed)
        self.label = label
        self.cursor = start

    def item_rng(self, index: int) -> np.random.Generator:
        return seeded_rng(self.root_seed, f"{self.label}#{index}")

    def take(self, n: int) -> range:
        r = range(self.cursor, self.cursor + n)
        self.cursor += n
        return r
