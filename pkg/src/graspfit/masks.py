"""Per-pixel occupancy images and their PNG/array plumbing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DimensionMismatch


@dataclass
class MaskImage:
    """Single-channel occupancy image, values in [0, 1], row-major (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionMismatch("mask must be 2D (H, W)")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.values > threshold

    def save_png(self, path) -> None:
        img = np.round(self.values * 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(path)

    @classmethod
    def load_png(cls, path) -> "MaskImage":
        img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
        return cls(img / 255.0)

    @classmethod
    def zeros(cls, width: int, height: int) -> "MaskImage":
        return cls(np.zeros((height, width)))

    def downscale(self, factor: int) -> "MaskImage":
        """Area-averaged integer downscaling."""
        if factor == 1:
            return MaskImage(self.values.copy())
        h = self.height // factor * factor
        w = self.width // factor * factor
        v = self.values[:h, :w].reshape(h // factor, factor, w // factor, factor)
        return MaskImage(v.mean(axis=(1, 3)))


def union(masks: list[MaskImage], width: int, height: int) -> MaskImage:
    """Pixelwise max of masks; empty list gives an all-zero mask."""
    out = np.zeros((height, width))
    for m in masks:
        if (m.height, m.width) != (height, width):
            raise DimensionMismatch("mask size mismatch in union")
        np.maximum(out, m.values, out=out)
    return MaskImage(out)
