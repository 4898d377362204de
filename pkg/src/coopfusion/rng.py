"""Deterministic named-seed RNG streams.

Every random draw in the package flows through `seeded`, which derives an
independent numpy Generator from a root seed plus a tuple of string/int names.
The derivation is sha256-based so streams are stable across processes,
platforms, and interpreter restarts (unlike builtin hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, *names: object) -> int:
    """Stable 64-bit key for a named substream of `root_seed`."""
    tag = "/".join(str(n) for n in (root_seed, *names))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seeded(root_seed: int, *names: object) -> np.random.Generator:
    """Independent Generator for (root_seed, *names)."""
    return np.random.default_rng(stream_key(root_seed, *names))
