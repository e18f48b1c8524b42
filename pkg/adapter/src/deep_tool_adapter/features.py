"""Perceptual distance from a fixed convolutional feature stack.

The shape follows the usual learned-metric recipe: a few conv stages,
unit-normalized feature vectors at every spatial position, and a
channel-weighted mean of squared feature differences summed over
stages. The filters are not trained; they are drawn once from a seeded
generator, so every process built from the same seed computes the same
distances, and an image compared with itself comes out at exactly zero.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_STAGE_WIDTHS = (8, 16, 24)
_MIN_SIDE = 8
_EPS = 1e-10


def _conv3x3(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    return np.einsum("hwcij,oijc->hwo", windows, kernels, optimize=True)


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h = (x.shape[0] // 2) * 2
    w = (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def _unit_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / (norm + _EPS)


class DeepFeatureMetric:
    """Distance between two RGB images in a shared seeded feature space."""

    def __init__(self, seed: int = 2024):
        rng = np.random.default_rng(seed)
        self._stages = []
        fan_in = 3
        for width in _STAGE_WIDTHS:
            kernels = rng.normal(
                0.0, 1.0 / np.sqrt(9.0 * fan_in), size=(width, 3, 3, fan_in)
            )
            channel_weights = rng.uniform(0.05, 1.0, size=width) / width
            self._stages.append((kernels, channel_weights))
            fan_in = width

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        """Normalized feature maps per stage for one uint8 RGB image."""
        x = image.astype(np.float64) / 127.5 - 1.0
        maps = []
        for kernels, _ in self._stages:
            x = _conv3x3(x, kernels)
            np.maximum(x, 0.0, out=x)
            maps.append(_unit_normalize(x))
            x = _avg_pool2(x)
        return maps

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.ndim != 3 or a.shape[-1] != 3 or b.ndim != 3 or b.shape[-1] != 3:
            raise ValueError("expected RGB images shaped (H, W, 3)")
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        if min(a.shape[0], a.shape[1]) < _MIN_SIDE:
            raise ValueError(f"images must be at least {_MIN_SIDE}x{_MIN_SIDE}")
        total = 0.0
        maps_a = self.features(a)
        maps_b = self.features(b)
        for fa, fb, (_, channel_weights) in zip(maps_a, maps_b, self._stages):
            diff = fa - fb
            per_channel = np.mean(diff * diff, axis=(0, 1))
            total += float(per_channel @ channel_weights)
        return total
