"""Image file I/O: 8-bit PNG and binary PGM/PPM in, PNG out.

Intensities map between the byte range and the unit interval by x/255 on
load and round(x*255) (half up) on save.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .spectra import Image

__all__ = ["load_image", "save_png"]


def load_image(path: str | os.PathLike) -> Image:
    """Read a grayscale or RGB raster file into a unit-interval image."""
    path = Path(path)
    try:
        with PILImage.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64)[:, :, None]
            else:
                if img.mode != "RGB":
                    img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image file {path}: {exc}") from exc
    return Image.from_array(arr / 255.0, clamp=True)


def save_png(image: Image, path: str | os.PathLike) -> None:
    """Write an image as 8-bit PNG (atomically: write temp, then rename)."""
    path = Path(path)
    data = np.clip(image.data, 0.0, 1.0)
    quantized = np.floor(data * 255.0 + 0.5).astype(np.uint8)
    if quantized.shape[2] == 1:
        pil = PILImage.fromarray(quantized[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(quantized, mode="RGB")
    tmp = path.with_name(path.name + ".tmp")
    pil.save(tmp, format="PNG")
    os.replace(tmp, path)
