"""Seed derivation.

Every random stream is derived from the root seed plus a component name and
indices, so results do not depend on evaluation order or worker count::

    rng = make_rng(seed, "rollout", epoch, query_id)
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *parts: object) -> int:
    """Hash ``root`` and ``parts`` into a 63-bit seed."""
    payload = "\x1f".join([str(int(root))] + [str(p) for p in parts]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_rng(root: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *parts))
