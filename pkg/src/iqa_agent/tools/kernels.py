"""Native full-reference scoring kernels: PSNR, SSIM, MS-SSIM and GMSD.

All kernels consume uint8 (or float) arrays, convert color inputs to
Rec.601 luma where the classical definition works on luminance, and run in
float64 on the 0..255 range. They are pure functions of the two rasters,
which makes every one of them symmetric in its arguments except where the
definition itself is asymmetric (none here: the four kernels are symmetric
because no reference-side rescaling is applied).
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d


class DimensionMismatchError(ValueError):
    """The two images disagree in shape or channel count."""


class ImageTooSmallError(ValueError):
    """The image is smaller than the kernel's filter window allows."""


PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_LUMA_PEAK = 255.0

# Relative weight of each dyadic scale, coarsest last. With fewer usable
# scales the leading entries are renormalized to sum to one.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_GMSD_STABILIZER = 170.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionMismatchError(f"expected 2-D or 3-D arrays, got {a.ndim}-D")


def to_luma(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma in float64; grayscale input passes through as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    raise DimensionMismatchError(f"cannot take luma of shape {arr.shape}")


def psnr(distorted: np.ndarray, reference: np.ndarray, peak: float = 255.0,
         cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB over all channels.

    Identical inputs have zero MSE, for which the capped value is returned
    instead of infinity.
    """
    a = np.asarray(distorted, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_components(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-window SSIM map and contrast-structure map (valid region only)."""
    if min(x.shape) < _SSIM_WINDOW:
        raise ImageTooSmallError(
            f"SSIM needs both dimensions >= {_SSIM_WINDOW}, got {x.shape}"
        )
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * _LUMA_PEAK) ** 2
    c2 = (_SSIM_K2 * _LUMA_PEAK) ** 2

    mu_x = convolve2d(x, window, mode="valid")
    mu_y = convolve2d(y, window, mode="valid")
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = convolve2d(x * x, window, mode="valid") - mu_xx
    sigma_yy = convolve2d(y * y, window, mode="valid") - mu_yy
    sigma_xy = convolve2d(x * y, window, mode="valid") - mu_xy

    cs_map = (2.0 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    ssim_map = ((2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs_map
    return ssim_map, cs_map


def ssim(distorted: np.ndarray, reference: np.ndarray) -> float:
    """Mean structural similarity with the classical 11x11 Gaussian window."""
    x = to_luma(np.asarray(distorted))
    y = to_luma(np.asarray(reference))
    _check_pair(x, y)
    ssim_map, _ = _ssim_components(x, y)
    return float(ssim_map.mean())


def _downsample2(image: np.ndarray) -> np.ndarray:
    """2x2 mean pooling with odd edges cropped."""
    h, w = image.shape
    h2, w2 = h - h % 2, w - w % 2
    trimmed = image[:h2, :w2]
    return 0.25 * (
        trimmed[0::2, 0::2] + trimmed[1::2, 0::2] + trimmed[0::2, 1::2] + trimmed[1::2, 1::2]
    )


def ms_ssim(distorted: np.ndarray, reference: np.ndarray) -> float:
    """Multi-scale SSIM over up to five dyadic scales.

    Uses as many scales as the image size supports (each scale needs both
    dimensions to stay >= the filter window); the scale weights are
    renormalized when fewer than five are usable, so a single usable scale
    reduces to plain SSIM.
    """
    x = to_luma(np.asarray(distorted))
    y = to_luma(np.asarray(reference))
    _check_pair(x, y)
    if min(x.shape) < _SSIM_WINDOW:
        raise ImageTooSmallError(
            f"MS-SSIM needs both dimensions >= {_SSIM_WINDOW}, got {x.shape}"
        )

    usable = 1
    size = min(x.shape)
    while usable < len(MS_SSIM_WEIGHTS) and size // 2 >= _SSIM_WINDOW:
        usable += 1
        size //= 2
    weights = np.asarray(MS_SSIM_WEIGHTS[:usable], dtype=np.float64)
    weights = weights / weights.sum()

    value = 1.0
    for scale in range(usable):
        ssim_map, cs_map = _ssim_components(x, y)
        if scale == usable - 1:
            term = float(ssim_map.mean())
        else:
            term = float(cs_map.mean())
            x = _downsample2(x)
            y = _downsample2(y)
        # Guard the fractional power; negative terms only arise on adversarial
        # inputs and would otherwise produce complex values.
        value *= max(term, 0.0) ** weights[scale]
    return float(value)


def gmsd(distorted: np.ndarray, reference: np.ndarray,
         stabilizer: float = _GMSD_STABILIZER) -> float:
    """Gradient magnitude similarity deviation (lower is better).

    Both images are mean-filtered and decimated by two, Prewitt gradients
    are compared through a stabilized similarity map, and the score is the
    population standard deviation of that map. Identical images score
    exactly zero. No rescaling toward either argument is applied, which
    keeps the measure symmetric.
    """
    x = to_luma(np.asarray(distorted))
    y = to_luma(np.asarray(reference))
    _check_pair(x, y)
    if min(x.shape) < 4:
        raise ImageTooSmallError(f"GMSD needs both dimensions >= 4, got {x.shape}")

    prewitt_x = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
    prewitt_y = prewitt_x.T
    mean2 = np.ones((2, 2)) / 4.0

    def _prepare(img: np.ndarray) -> np.ndarray:
        averaged = convolve2d(img, mean2, mode="same", boundary="symm")
        return averaged[0::2, 0::2]

    xs = _prepare(x)
    ys = _prepare(y)
    gx = np.sqrt(
        convolve2d(xs, prewitt_x, mode="same", boundary="symm") ** 2
        + convolve2d(xs, prewitt_y, mode="same", boundary="symm") ** 2
    )
    gy = np.sqrt(
        convolve2d(ys, prewitt_x, mode="same", boundary="symm") ** 2
        + convolve2d(ys, prewitt_y, mode="same", boundary="symm") ** 2
    )
    similarity = (2.0 * gx * gy + stabilizer) / (gx * gx + gy * gy + stabilizer)
    return float(np.std(similarity))


NATIVE_KERNELS = {
    "psnr": psnr,
    "ssim": ssim,
    "ms_ssim": ms_ssim,
    "gmsd": gmsd,
}
