"""Deterministic fixtures shared across the test suite."""

from __future__ import annotations

import numpy as np


def seeded_rgb(seed: int, height: int = 64, width: int = 64) -> np.ndarray:
    """Smooth-ish random RGB image, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 255.0, size=(height, width, 3))
    # Average neighbouring pixels once so the image has local structure
    # instead of being pure white noise.
    padded = np.pad(base, ((1, 1), (1, 1), (0, 0)), mode="edge")
    smooth = (
        padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:] + base
    ) / 5.0
    return np.clip(smooth, 0.0, 255.0).astype(np.uint8)


def seeded_gray(seed: int, height: int = 64, width: int = 64) -> np.ndarray:
    return seeded_rgb(seed, height, width)[..., 0]


def degraded(image: np.ndarray, seed: int, sigma: float = 12.0) -> np.ndarray:
    """Additive-noise rendition of ``image`` with the same shape and dtype."""
    rng = np.random.default_rng(seed)
    noisy = image.astype(np.float64) + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 255.0).astype(np.uint8)


def seeded_pair(seed: int, height: int = 64, width: int = 64, sigma: float = 12.0):
    """(reference, distorted) pair derived from one seed."""
    ref = seeded_rgb(seed, height, width)
    return ref, degraded(ref, seed + 1000, sigma)
