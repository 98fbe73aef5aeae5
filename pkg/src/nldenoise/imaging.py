"""Grayscale images on a padded pixel grid, plus noise synthesis and quality metrics.

Images are stored as float64 arrays with an explicit zero ring of ``pad``
pixels on every side.  The ring hosts the homogeneous volume constraint of
the nonlocal operator: those pixels participate in kernel interactions but
are never unknowns.  All metrics are evaluated on the interior only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as _PILImage

__all__ = [
    "Image",
    "NoiseSpec",
    "QualityReport",
    "add_gaussian_noise",
    "ssim",
    "psnr",
    "l2_loss",
    "quality_report",
    "read_image",
    "write_image",
    "downscale",
    "textured_image",
    "SIGMA2_PRESETS",
    "DELTA_PRESETS",
]

# Half-decade noise-variance ladder with the matched kernel decay scale
# delta (the kernel weight is w = delta**-2).
SIGMA2_PRESETS = {"a": 10.0**1.5, "b": 10.0**2, "c": 10.0**2.5, "d": 10.0**3}
DELTA_PRESETS = {"a": 3.0e1, "b": 1.0e2, "c": 3.16e2, "d": 3.33e2}

# Luma weights used when collapsing RGB input to grayscale.
_LUMA = np.array([0.299, 0.587, 0.114])


class Image:
    """A grayscale image with a zero padding ring.

    Parameters
    ----------
    values : ndarray
        Full padded array of shape ``(height + 2*pad, width + 2*pad)``.
        The outer ``pad`` ring must be exactly zero.
    pad : int
        Width of the padding ring in pixels (>= 0).
    """

    __slots__ = ("values", "pad")

    def __init__(self, values, pad):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("image values must be a 2-d array")
        pad = int(pad)
        if pad < 0:
            raise ValueError("pad must be non-negative")
        if values.shape[0] <= 2 * pad or values.shape[1] <= 2 * pad:
            raise ValueError("padded image leaves no interior pixels")
        if pad and not _ring_is_zero(values, pad):
            raise ValueError("padding ring must be exactly zero")
        values.flags.writeable = False  # images are immutable once built
        self.values = values
        self.pad = pad

    @classmethod
    def from_interior(cls, interior, pad):
        """Zero-extend an interior pixel array by ``pad`` on each side."""
        interior = np.asarray(interior, dtype=np.float64)
        if interior.ndim != 2:
            raise ValueError("interior must be a 2-d array")
        full = np.zeros((interior.shape[0] + 2 * pad, interior.shape[1] + 2 * pad))
        if pad:
            full[pad:-pad, pad:-pad] = interior
        else:
            full[...] = interior
        return cls(full, pad)

    @property
    def height(self):
        return self.values.shape[0] - 2 * self.pad

    @property
    def width(self):
        return self.values.shape[1] - 2 * self.pad

    @property
    def interior(self):
        """Read-only view of the interior pixels."""
        p = self.pad
        if p == 0:
            return self.values
        return self.values[p:-p, p:-p]

    def with_interior(self, interior):
        """New image with the same padding and replaced interior values."""
        return Image.from_interior(interior, self.pad)

    def interior_vector(self):
        """Interior pixels flattened row-major."""
        return self.interior.ravel().copy()

    def __repr__(self):
        return f"Image({self.height}x{self.width}, pad={self.pad})"


def _ring_is_zero(values, pad):
    return (
        not values[:pad].any()
        and not values[-pad:].any()
        and not values[:, :pad].any()
        and not values[:, -pad:].any()
    )


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise: variance sigma^2 and RNG seed."""

    variance: float
    seed: int = 0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("noise variance must be positive")


def add_gaussian_noise(clean, spec):
    """Corrupt the interior of ``clean`` with N(0, sigma^2) noise.

    The draw is deterministic per seed and is not clamped to [0, 255];
    out-of-range samples are kept as-is.
    """
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, math.sqrt(spec.variance), size=(clean.height, clean.width))
    return clean.with_interior(clean.interior + noise)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    # Separable correlation would be marginally faster; a direct sliding
    # window keeps the 'valid' semantics obvious and the arrays are small.
    k = window.shape[0]
    h, w = img.shape
    out = np.zeros((h - k + 1, w - k + 1))
    for r in range(k):
        for c in range(k):
            out += window[r, c] * img[r : r + h - k + 1, c : c + w - k + 1]
    return out


def ssim(a, b, *, window_size=11, sigma=1.5):
    """Mean structural similarity between the interiors of two images.

    Gaussian-weighted local statistics (11x11 window, sigma 1.5) with the
    standard stabilisation constants for a 255 dynamic range; the local map
    uses 'valid' windows only.  For interiors smaller than the window the
    window shrinks to the largest odd size that fits.

    Returns
    -------
    float in (0, 1]; exactly 1.0 for identical inputs.
    """
    x, y = _paired_interiors(a, b)
    k = min(window_size, x.shape[0], x.shape[1])
    if k % 2 == 0:
        k -= 1
    if k < 1:
        raise ValueError("image too small for SSIM")
    win = _gaussian_window(k, sigma)
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    xx = _filter_valid(x * x, win) - mu_x * mu_x
    yy = _filter_valid(y * y, win) - mu_y * mu_y
    xy = _filter_valid(x * y, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * xy + _SSIM_C2)
    den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (xx + yy + _SSIM_C2)
    return float(np.mean(num / den))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over the interior, peak 255.

    Identical images return ``math.inf``.
    """
    x, y = _paired_interiors(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def l2_loss(a, b):
    """Half squared l2 distance between interiors: 0.5 * sum((a-b)^2)."""
    x, y = _paired_interiors(a, b)
    d = x - y
    return 0.5 * float(np.dot(d.ravel(), d.ravel()))


def _paired_interiors(a, b):
    x = a.interior if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    y = b.interior if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


@dataclass(frozen=True)
class QualityReport:
    """SSIM / PSNR / half squared-error of a reconstruction against truth."""

    ssim: float
    psnr: float
    l2_loss: float

    def rounded(self, digits=4):
        p = self.psnr if math.isinf(self.psnr) else round(self.psnr, digits)
        return QualityReport(round(self.ssim, digits), p, self.l2_loss)


def quality_report(candidate, truth):
    return QualityReport(
        ssim=ssim(candidate, truth),
        psnr=psnr(candidate, truth),
        l2_loss=l2_loss(candidate, truth),
    )


# ---------------------------------------------------------------------------
# File input / output (8-bit grayscale PGM and PNG)
# ---------------------------------------------------------------------------


def read_image(path, pad):
    """Load a PGM/PNG file as a padded grayscale image.

    Color input is collapsed with luma weights 0.299/0.587/0.114; pixel
    values are kept as float64 in [0, 255].
    """
    with _PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.float64) @ _LUMA
    arr = arr.astype(np.float64)
    return Image.from_interior(arr, pad)


def write_image(path, image, *, normalize=False):
    """Write the interior of ``image`` as 8-bit PGM or PNG (by extension).

    Values are clamped to [0, 255] and rounded; with ``normalize`` the
    interior is min-max scaled to the full 8-bit range first (used for
    parameter maps whose natural range is not [0, 255]).
    """
    arr = image.interior if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        arr = np.zeros_like(arr) if hi == lo else (arr - lo) * (255.0 / (hi - lo))
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    _PILImage.fromarray(data, mode="L").save(path)


def downscale(image, factor):
    """Nearest-neighbour downscale of the interior by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("downscale factor must be >= 1")
    return image.with_interior(image.interior[::factor, ::factor])


# ---------------------------------------------------------------------------
# Synthetic test content
# ---------------------------------------------------------------------------


def textured_image(height=64, width=64, pad=0, seed=7):
    """Deterministic grayscale test image in [0, 255].

    Mixes smooth large-scale illumination, a gentle periodic weave (whose
    repeated patches patch-based filtering exploits), block edges and a soft
    highlight.  Smooth regions dominate, so moderate additive noise visibly
    degrades structural similarity and denoising has headroom to recover it.
    """
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    base = 110.0 + 55.0 * np.cos(2.0 * np.pi * rr / height) \
        * np.sin(2.0 * np.pi * cc / width)
    weave = 12.0 * np.sin(2.0 * np.pi * rr / 8.0) * np.sin(2.0 * np.pi * (rr + cc) / 12.0)
    blocks = 27.0 * (((rr // 16) + (cc // 16)) % 2)
    r2 = (rr - height / 2.0) ** 2 + (cc - width / 2.0) ** 2
    ramp = 40.0 * np.exp(-r2 / (2.0 * (0.35 * min(height, width)) ** 2))
    rng = np.random.default_rng(seed)
    speckle = rng.normal(0.0, 1.0, size=(height, width))
    img = base + weave + blocks + ramp + speckle
    return Image.from_interior(np.clip(img, 0.0, 255.0), pad)
