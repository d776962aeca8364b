#!/usr/bin/env python3
"""Regenerate the bundled test textures (deterministic; committed as PNG).

Each texture is seeded spectral-shaped noise: white noise filtered to a
power-law amplitude spectrum, which mimics the frequency content of
natural photographs. The two bundles use different spectral slopes so
their resolution schedules differ measurably.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

SIZE = 128
OUT_DIR = Path(__file__).resolve().parent.parent / "src" / "dashsplat" / "data"

SPECS = [
    # (name, spectral slope, seed) - larger slope = smoother image
    ("texture_smooth.png", 1.8, 11),
    ("texture_detail.png", 0.9, 23),
]


def spectral_noise(size: int, slope: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal((size, size))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0 / size
    shaped = np.fft.ifft2(spec * radius**-slope).real
    lo, hi = shaped.min(), shaped.max()
    return (shaped - lo) / (hi - lo)


def make_texture(slope: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = spectral_noise(SIZE, slope, rng)
    # correlated chroma: small independent perturbations per channel
    channels = []
    for _ in range(3):
        tint = spectral_noise(SIZE, slope, rng)
        channels.append(np.clip(0.15 + 0.7 * base + 0.12 * (tint - 0.5), 0.0, 1.0))
    rgb = np.stack(channels, axis=2)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for name, slope, seed in SPECS:
        arr = make_texture(slope, seed)
        PILImage.fromarray(arr, mode="RGB").save(OUT_DIR / name)
        print(f"wrote {OUT_DIR / name}")


if __name__ == "__main__":
    main()
