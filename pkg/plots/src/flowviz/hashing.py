"""Structural image hashing for golden-figure tests.

Average-hash on a downscaled grayscale image: robust to the small rendering
differences between matplotlib versions, sensitive to layout/content changes.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

HASH_SIDE = 16
HASH_BITS = HASH_SIDE * HASH_SIDE


def structural_hash(path) -> np.ndarray:
    img = Image.open(path).convert("L").resize((HASH_SIDE, HASH_SIDE), Image.LANCZOS)
    arr = np.asarray(img, dtype=float)
    return (arr > arr.mean()).ravel()


def hash_distance(path_a, path_b) -> int:
    return int(np.sum(structural_hash(path_a) != structural_hash(path_b)))


def matches_golden(path, golden_path, tolerance: int = 32) -> bool:
    """Hamming distance within tolerance bits (out of 256)."""
    return hash_distance(path, golden_path) <= tolerance
