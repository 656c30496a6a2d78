"""Deterministic seed derivation."""

import hashlib

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for ``(base, *keys)``."""
    sequence = np.random.SeedSequence([int(base) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])
    return int(sequence.generate_state(1)[0])


def content_seed(base: int, array: np.ndarray) -> int:
    """Seed that depends only on ``base`` and the bytes of ``array``."""
    digest = hashlib.sha256(np.ascontiguousarray(array).tobytes()).digest()
    return derive_seed(base, int.from_bytes(digest[:4], "little"))
