"""Named, hash-derived random streams.

Every random draw in the package is taken from a generator whose seed is a
pure function of a master seed and a tuple of stream names, so any sub-run
(stage, lattice, problem, rollout) can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *names: object) -> int:
    """Map (master, names...) to a stable 63-bit seed."""
    text = ":".join([str(int(master))] + [str(n) for n in names])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stream(master: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
