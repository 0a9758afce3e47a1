"""Edgeness feature maps, image entropy, and feature-space MSE.

The edgeness value at a pixel is the sum of absolute intensity differences
to every pixel strictly inside a disk of radius r_f around it.  It captures
local intensity variation rather than a binary edge decision, which keeps
the registration objective away from flat local maxima.  Global registration
similarity is the mean squared error between edgeness maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from histostack.image import Image
from histostack.imageio import write_pgm

DEFAULT_EDGENESS_RADIUS = 3


class OverlapError(Exception):
    pass


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray
    radius: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature map must be 2D")
        if values.size and values.min() < 0:
            raise ValueError("feature values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def disk_offsets(r_f: float) -> list[tuple[int, int]]:
    """Integer offsets (dy, dx) with Euclidean norm strictly below r_f,
    excluding the center."""
    bound = int(math.ceil(r_f))
    offsets = []
    for dy in range(-bound, bound + 1):
        for dx in range(-bound, bound + 1):
            if (dy, dx) == (0, 0):
                continue
            if dy * dy + dx * dx < r_f * r_f:
                offsets.append((dy, dx))
    return offsets


def edgeness_values(pixels: np.ndarray, r_f: float) -> np.ndarray:
    """Edgeness over a raw 2D array; border pixels sum over the in-bounds
    part of the disk."""
    p = np.asarray(pixels, dtype=np.float64)
    h, w = p.shape
    out = np.zeros((h, w))
    for dy, dx in disk_offsets(r_f):
        sy0, sy1 = max(0, dy), h + min(0, dy)
        sx0, sx1 = max(0, dx), w + min(0, dx)
        dy0, dy1 = max(0, -dy), h + min(0, -dy)
        dx0, dx1 = max(0, -dx), w + min(0, -dx)
        out[dy0:dy1, dx0:dx1] += np.abs(p[sy0:sy1, sx0:sx1] - p[dy0:dy1, dx0:dx1])
    return out


def edgeness_map(img: Image, r_f: float = DEFAULT_EDGENESS_RADIUS) -> FeatureMap:
    if r_f < 1:
        raise ValueError("edgeness radius must be >= 1")
    return FeatureMap(edgeness_values(img.pixels, r_f), r_f)


def entropy(img: Image) -> float:
    """Shannon entropy in bits of the empirical intensity distribution."""
    counts = np.bincount(img.pixels.ravel())
    p = counts[counts > 0] / img.pixels.size
    return float(-np.sum(p * np.log2(p)))


def feature_mse(a: FeatureMap, b: FeatureMap, mask: np.ndarray | None = None) -> float:
    """Mean squared difference between feature maps, optionally restricted
    to an overlap mask."""
    if a.values.shape != b.values.shape:
        raise ValueError("feature map dimensions differ")
    if a.radius != b.radius:
        raise ValueError("feature map radii differ")
    diff = a.values - b.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.values.shape:
            raise ValueError("mask dimensions differ")
        diff = diff[mask]
        if diff.size == 0:
            raise OverlapError("no overlap")
    return float(np.mean(diff * diff))


def write_feature_pgm(path, fm: FeatureMap) -> None:
    """Export a feature map as 16-bit PGM for visual inspection.

    Values are rescaled linearly so the maximum hits 65535; the factor is
    recorded in a sidecar text file next to the image.
    """
    peak = float(fm.values.max()) if fm.values.size else 0.0
    factor = 65535.0 / peak if peak > 0 else 0.0
    scaled = np.rint(fm.values * factor).astype(np.uint16)
    write_pgm(path, Image(scaled, 65535))
    sidecar = Path(str(path) + ".scale")
    sidecar.write_text(
        f"scale_factor {format(factor, '.17g')}\n"
        f"radius {format(fm.radius, '.17g')}\n"
    )
