"""Grayscale image container, interpolation, warping, and pyramids.

Images are immutable after construction (pixel buffers are set read-only) so
they can be shared freely across concurrent tasks.  All warping uses inverse
mapping with bilinear sampling: each output pixel looks up where it came from
in the source, which avoids the holes a forward mapping would leave.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from histostack.transform import Affine2D, LocalAffineField, invert

MAX_SUPPORTED_GRAY = 65535
MIN_PYRAMID_SIDE = 16


class EmptyImageError(Exception):
    pass


class PyramidDepthError(Exception):
    pass


@dataclass(frozen=True)
class Image:
    """2D grayscale section image.

    ``pixels`` is a read-only (height, width) uint16 array with every value
    in [0, max_gray].  ``pixel_size_um`` is optional acquisition metadata and
    plays no role in the math.
    """

    pixels: np.ndarray
    max_gray: int
    pixel_size_um: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise EmptyImageError("empty image")
        if not (0 < self.max_gray <= MAX_SUPPORTED_GRAY):
            raise ValueError(f"max_gray must be in [1, {MAX_SUPPORTED_GRAY}]")
        if np.issubdtype(px.dtype, np.floating):
            raise TypeError("pixels must be integer-valued; round before constructing")
        if px.dtype != np.uint16:
            if px.min() < 0:
                raise ValueError("negative pixel value")
        if px.max() > self.max_gray:
            raise ValueError(
                f"pixel value {int(px.max())} exceeds max_gray {self.max_gray}"
            )
        px = px.astype(np.uint16)  # astype always copies
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @staticmethod
    def from_array(arr, max_gray: int, pixel_size_um: float | None = None) -> "Image":
        return Image(np.asarray(arr), int(max_gray), pixel_size_um)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)

    def same_pixels(self, other: "Image") -> bool:
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class Pyramid:
    """Coarse-to-fine image stack; level 0 is the finest (the original)."""

    levels: tuple[Image, ...]
    decimation_factor: int = 2

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Image:
        return self.levels[i]


def to_grayscale(color_image: np.ndarray, pixel_size_um: float | None = None) -> Image:
    """Convert an (H, W, 3) RGB array to grayscale with Rec.601 luma weights."""
    rgb = np.asarray(color_image)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise EmptyImageError("empty image")
    rgb = rgb.astype(np.float64)
    if rgb.min() < 0 or rgb.max() > 255:
        raise ValueError("channel values must be in [0, 255]")
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return Image(np.rint(luma).astype(np.uint16), 255, pixel_size_um)


def sample_grid(
    pixels: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    fill: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear sampling with an in-domain mask.

    Coordinates outside [0, width-1] x [0, height-1] yield ``fill`` and a
    False mask entry.  ``pixels`` may be any numeric dtype; output is float64.
    """
    h, w = pixels.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)

    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    p = pixels.astype(np.float64, copy=False)
    v00 = p[y0, x0]
    v01 = p[y0, x1]
    v10 = p[y1, x0]
    v11 = p[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    return np.where(valid, out, fill), valid


def sample_bilinear(img: Image, x: float, y: float, fill: float = 0.0) -> float:
    """Bilinear intensity at real coordinate (x, y); ``fill`` outside the domain."""
    val, _ = sample_grid(img.pixels, np.array([x]), np.array([y]), fill)
    return float(val[0])


def _pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_arrays(
    pixels: np.ndarray,
    t: Affine2D | LocalAffineField,
    fill: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a raw array, returning (float64 output, in-domain mask).

    For an affine transform the output pixel p samples the source at
    ``t^{-1}(p)``; a local affine field already stores the sampling map and
    is applied directly.
    """
    h, w = pixels.shape
    if isinstance(t, Affine2D):
        inv = invert(t)
        xs, ys = _pixel_grid(w, h)
        qx = inv.m[0, 0] * xs + inv.m[0, 1] * ys + inv.t[0]
        qy = inv.m[1, 0] * xs + inv.m[1, 1] * ys + inv.t[1]
    elif isinstance(t, LocalAffineField):
        if t.height != h or t.width != w:
            raise ValueError("field dimensions do not match image")
        qx, qy = t.sample_coordinates()
    else:
        raise TypeError(f"unsupported transform type: {type(t).__name__}")
    return sample_grid(pixels, qx, qy, fill)


def warp(img: Image, t: Affine2D | LocalAffineField, fill: float = 0.0) -> Image:
    """Resample ``img`` under transform ``t``; same dimensions as the input.

    Output intensities are rounded and clipped to [0, max_gray]; pixels whose
    inverse-mapped coordinate falls outside the source get ``fill``.
    """
    out, _ = warp_arrays(img.pixels, t, fill)
    out = np.clip(np.rint(out), 0, img.max_gray).astype(np.uint16)
    return Image(out, img.max_gray, img.pixel_size_um)


def _box_decimate(values: np.ndarray) -> np.ndarray:
    """2x2 box-filter average then decimate; odd edges replicate the last
    row/column so every output bin averages a full 2x2 block."""
    h, w = values.shape
    if h % 2:
        values = np.vstack([values, values[-1:, :]])
    if w % 2:
        values = np.hstack([values, values[:, -1:]])
    h2, w2 = values.shape[0] // 2, values.shape[1] // 2
    return values.reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def build_pyramid(img: Image, levels: int) -> Pyramid:
    """Coarse-to-fine pyramid by repeated 2x2 box filtering and decimation."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    side = min(img.width, img.height)
    for _ in range(levels - 1):
        side = (side + 1) // 2
    if side < MIN_PYRAMID_SIDE:
        raise PyramidDepthError("pyramid too deep")

    out = [img]
    current = img.as_float()
    for _ in range(levels - 1):
        current = _box_decimate(current)
        rounded = np.clip(np.rint(current), 0, img.max_gray).astype(np.uint16)
        out.append(Image(rounded, img.max_gray, img.pixel_size_um))
    return Pyramid(tuple(out), 2)


def max_pyramid_levels(width: int, height: int) -> int:
    """Deepest pyramid keeping the coarsest level at least 16x16."""
    levels = 1
    side = min(width, height)
    while True:
        nxt = (side + 1) // 2
        if nxt < MIN_PYRAMID_SIDE:
            return levels
        side = nxt
        levels += 1
