"""Three-scale Gaussian pyramid over raw RGB frames.

Pixel values are used as-is (0..255, no normalization); the only processing
is blur-then-decimate with a small separable kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import ShapeError, ensure_finite


@dataclass(frozen=True)
class PyramidConfig:
    """Blur/decimate settings.  sigma follows the downscale/3 rule."""

    downscale: int = 2

    def __post_init__(self):
        if self.downscale < 2:
            raise ValueError(f"downscale must be >= 2, got {self.downscale}")

    @property
    def sigma(self) -> float:
        return self.downscale / 3.0

    @property
    def truncation_radius(self) -> int:
        return math.ceil(4.0 * self.sigma)


@dataclass(frozen=True)
class PyramidTriple:
    i0: np.ndarray  # (3, H, W), the untouched input
    i1: np.ndarray  # (3, H/2, W/2)
    i2: np.ndarray  # (3, H/4, W/4)

    @property
    def scales(self):
        return (self.i0, self.i1, self.i2)


def gaussian_taps(sigma, radius):
    """1-D Gaussian kernel, truncated at +-radius, normalized to sum 1."""
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(x, taps, axis):
    # reflect borders: mirror about the edge sample, matching numpy 'reflect'
    n = x.shape[axis]
    if n == 1:
        return x.copy()  # taps sum to 1 over a single repeated sample
    radius = len(taps) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    for t, k in enumerate(taps):
        idx[axis] = slice(t, t + n)
        out += k.astype(x.dtype) * xp[tuple(idx)]
    return out


def gaussian_blur(image, config: PyramidConfig = PyramidConfig()):
    """Separable per-channel blur with reflect borders; shape preserved."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"gaussian_blur: expected (C, H, W), got {image.shape}")
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    taps = gaussian_taps(config.sigma, config.truncation_radius)
    out = _blur_axis(image, taps, axis=2)
    out = _blur_axis(out, taps, axis=1)
    return ensure_finite(out, "gaussian_blur")


def build_pyramid(image, config: PyramidConfig = PyramidConfig()) -> PyramidTriple:
    """Recursive blur+decimate; keeps even-indexed samples at each level."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"build_pyramid: expected (C, H, W), got {image.shape}")
    h, w = image.shape[1:]
    if h % 4 or w % 4:
        raise ShapeError(f"build_pyramid: extents must be multiples of 4, got {h}x{w}")
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    i1 = gaussian_blur(image, config)[:, ::config.downscale, ::config.downscale]
    i2 = gaussian_blur(i1, config)[:, ::config.downscale, ::config.downscale]
    return PyramidTriple(image, i1, i2)
