"""Frequency analysis of training images.

Centered 2D discrete Fourier transforms, ideal low-pass downsampling by
cropping the centered spectrum, and the spectral "significance" statistic
(mean summed bin magnitude) that drives resolution scheduling.

Conventions, frozen for reproducibility:

* forward transform is unnormalized, inverse divides by h*w, DC sits at
  index (h//2, w//2);
* a downsample by factor r crops the centered spectrum to extents
  round(h/r) x round(w/r) and scales amplitudes by exactly 1/r^2;
* the centered crop keeps the DC bin: for target extent t on an axis of
  size n the window starts at n//2 - t//2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Image",
    "SpectrumMap",
    "Significance",
    "dft2",
    "idft2",
    "antialias_downsample",
    "significance",
    "scaled_extent",
    "MIN_ANALYSIS_EXTENT",
]

# Images entering significance analysis must be at least this big.
MIN_ANALYSIS_EXTENT = 4


def scaled_extent(extent: int, r: float) -> int:
    """Half-up rounding of extent / r; the one rounding rule used everywhere."""
    if extent < 1:
        raise ValueError(f"extent must be positive, got {extent}")
    if r < 1.0:
        raise ValueError(f"downsampling factor must be >= 1, got {r}")
    return int(np.floor(extent / r + 0.5))


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=arr.dtype, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Image:
    """Raster of float64 intensities, shape (height, width, channels).

    Channel count is 1 or 3. Values are clamped to [0, 1] at load time;
    transform outputs may carry values outside that range on purpose.
    Instances are immutable and safe to share across threads.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = self.data
        if not isinstance(arr, np.ndarray) or arr.ndim != 3:
            raise ValueError("image data must be a (height, width, channels) array")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")

    @staticmethod
    def from_array(arr: np.ndarray, clamp: bool = False) -> "Image":
        """Wrap a (H, W) or (H, W, C) array as an immutable float64 image."""
        data = np.asarray(arr, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if clamp:
            data = np.clip(data, 0.0, 1.0)
        return Image(_frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, i: int = 0) -> np.ndarray:
        """2-D view of one channel."""
        return self.data[:, :, i]

    def luminance(self) -> "Image":
        """Single-channel image: unweighted mean over channels."""
        if self.channels == 1:
            return self
        return Image.from_array(self.data.mean(axis=2))

    def clamped(self) -> "Image":
        return Image.from_array(self.data, clamp=True)


@dataclass(frozen=True)
class SpectrumMap:
    """Complex frequency map of one image channel, DC bin at (h//2, w//2)."""

    bins: np.ndarray

    def __post_init__(self) -> None:
        if self.bins.ndim != 2:
            raise ValueError("spectrum bins must be a 2-D complex array")
        if self.bins.shape[0] < 1 or self.bins.shape[1] < 1:
            raise ValueError("spectrum must have at least one bin")

    @property
    def height(self) -> int:
        return self.bins.shape[0]

    @property
    def width(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True)
class Significance:
    """Summed spectral magnitude averaged over views, tagged with the factor."""

    value: float
    factor: float


def dft2(channel: Image) -> SpectrumMap:
    """Unnormalized forward transform of a single-channel image, DC centered."""
    if channel.channels != 1:
        raise ValueError("dft2 expects a single-channel image")
    arr = channel.channel(0)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite pixel value in transform input")
    bins = np.fft.fftshift(np.fft.fft2(arr))
    return SpectrumMap(_frozen(bins))


def idft2(spectrum: SpectrumMap) -> Image:
    """Inverse transform (1/(h*w) normalization); real part, not clamped."""
    out = np.fft.ifft2(np.fft.ifftshift(spectrum.bins))
    return Image.from_array(out.real)


def _centered_crop(bins: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w = bins.shape
    y0 = h // 2 - target_h // 2
    x0 = w // 2 - target_w // 2
    return bins[y0 : y0 + target_h, x0 : x0 + target_w]


def antialias_downsample(image: Image, r: float) -> Image:
    """Downsample by factor r via centered spectrum crop and 1/r^2 scaling.

    Output extents are round(h/r) x round(w/r); values are clamped to
    [0, 1]. r == 1 returns the input object unchanged.
    """
    r = float(r)
    if r < 1.0:
        raise ValueError(f"downsampling factor must be >= 1, got {r}")
    if r == 1.0:
        return image
    th = scaled_extent(image.height, r)
    tw = scaled_extent(image.width, r)
    if th < 2 or tw < 2:
        raise ValueError(
            f"factor {r} shrinks {image.height}x{image.width} below the 2x2 minimum"
        )
    scale = 1.0 / (r * r)
    out = np.empty((th, tw, image.channels))
    for c in range(image.channels):
        spec = dft2(Image.from_array(image.channel(c)))
        cropped = _centered_crop(spec.bins, th, tw) * scale
        out[:, :, c] = np.fft.ifft2(np.fft.ifftshift(cropped)).real
    return Image.from_array(out, clamp=True)


def significance(views: Sequence[Image], r: float) -> Significance:
    """Mean over views of the summed complex bin magnitude at factor r.

    Each view is reduced to luminance, downsampled by r, and transformed;
    the per-view sums are averaged in view-index order so the result is
    bit-stable.
    """
    views = list(views)
    if not views:
        raise ValueError("significance needs at least one view")
    h, w = views[0].height, views[0].width
    if h < MIN_ANALYSIS_EXTENT or w < MIN_ANALYSIS_EXTENT:
        raise ValueError(
            f"views must be at least {MIN_ANALYSIS_EXTENT}x{MIN_ANALYSIS_EXTENT}"
        )
    total = 0.0
    for i, view in enumerate(views):
        if view.height != h or view.width != w:
            raise ValueError(f"view {i} dimensions differ from view 0")
        small = antialias_downsample(view.luminance(), r)
        total += float(np.abs(dft2(small).bins).sum())
    return Significance(value=total / len(views), factor=float(r))
