"""Deterministic seed derivation.

Every stochastic step in the pipeline draws from a seed derived from a base
seed plus a purpose label, so whole runs are reproducible from one integer.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, label: str) -> int:
    """Stable 63-bit sub-seed for `label` under `base`."""
    digest = hashlib.sha256(f"{base}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(base: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, label))
