"""Named random substreams so one master seed drives every component."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator unique to (seed, name), stable across runs and platforms."""

    return np.random.default_rng(np.random.SeedSequence([seed, stream_id(name)]))
