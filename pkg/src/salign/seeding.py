"""Deterministic seed derivation.

Every source of randomness in a run is keyed by (root seed, string tags),
so batch order, weight init, and attack noise are pure functions of the
config seed and the position in the schedule. That is what makes
checkpoint-resume bit-identical to straight-through training.
"""

from __future__ import annotations

import hashlib

import torch


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit seed from a root seed and a tag path."""
    key = "|".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def derive_generator(seed: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *tags))
    return gen
