"""Correspondence alignment measure (CAM).

For control points on a regular grid in each interior slice, the
corresponding point in each of the two neighboring slices is found by
normalized cross-correlation block matching.  A perfectly placed point lies
midway between its two correspondences, so the per-point misalignment is
the norm of the *sum* of the two displacement vectors; CAM for a slice is
the mean over control points whose match confidence exceeds tau in both
neighbors.  Lower is smoother.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from histostack.image import Image

_NCC_TIE_EPS = 1e-12


@dataclass(frozen=True)
class CamConfig:
    match_window: int = 21
    search_radius: int = 10
    grid_spacing: int = 16
    tau: float = 0.0

    def __post_init__(self):
        if self.match_window < 3 or self.match_window % 2 == 0:
            raise ValueError("match_window must be odd and >= 3")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        if self.grid_spacing < self.match_window / 2:
            raise ValueError("grid_spacing must be >= match_window/2")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")


@dataclass(frozen=True)
class CamResult:
    """Per-slice CAM values (1-based slice index, cam, point count).

    Slices with no confident control point carry cam=nan and count=0 and are
    excluded from the mean/std aggregates (population std, ddof=0).
    """

    per_slice: tuple[tuple[int, float, int], ...]
    mean: float
    std: float


def find_correspondence(
    img: Image, neighbor: Image, point: tuple[int, int], cfg: CamConfig
) -> tuple[np.ndarray, float]:
    """Best integer displacement of ``point``'s window into ``neighbor``.

    Returns (displacement [dx, dy], confidence).  Confidence is the NCC
    value at the winning offset; -1 when the window is textureless or no
    candidate window fits inside the neighbor.
    """
    x, y = point
    half = cfg.match_window // 2
    if not (half <= x < img.width - half and half <= y < img.height - half):
        raise ValueError("match window leaves image bounds")
    window = img.pixels[y - half : y + half + 1, x - half : x + half + 1].astype(
        np.float64
    )
    w0 = window - window.mean()
    w_ss = float(np.sum(w0 * w0))
    if w_ss <= _NCC_TIE_EPS:
        return np.zeros(2), -1.0

    r = cfg.search_radius
    # displacement range that keeps the candidate window inside the neighbor
    dx_lo = max(-r, half - x)
    dx_hi = min(r, neighbor.width - 1 - half - x)
    dy_lo = max(-r, half - y)
    dy_hi = min(r, neighbor.height - 1 - half - y)
    if dx_lo > dx_hi or dy_lo > dy_hi:
        return np.zeros(2), -1.0

    region = neighbor.pixels[
        y + dy_lo - half : y + dy_hi + half + 1,
        x + dx_lo - half : x + dx_hi + half + 1,
    ].astype(np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(
        region, (cfg.match_window, cfg.match_window)
    )
    n = cfg.match_window * cfg.match_window
    sums = np.einsum("ijkl->ij", windows)
    sq_sums = np.einsum("ijkl,ijkl->ij", windows, windows)
    cross = np.einsum("kl,ijkl->ij", w0, windows)
    cand_ss = sq_sums - sums * sums / n
    valid = cand_ss > _NCC_TIE_EPS
    if not valid.any():
        return np.zeros(2), -1.0
    ncc = np.full(windows.shape[:2], -1.0)
    ncc[valid] = cross[valid] / np.sqrt(w_ss * cand_ss[valid])
    np.clip(ncc, -1.0, 1.0, out=ncc)

    best = float(ncc.max())
    ties_y, ties_x = np.nonzero(ncc >= best - _NCC_TIE_EPS)
    dxs = ties_x + dx_lo
    dys = ties_y + dy_lo
    # shortest displacement wins ties so a self-match reports exactly (0, 0)
    order = np.lexsort((dxs, dys, dxs * dxs + dys * dys))
    k = order[0]
    return np.array([dxs[k], dys[k]], dtype=np.float64), best


def control_grid(width: int, height: int, cfg: CamConfig) -> list[tuple[int, int]]:
    """Grid of control points whose match windows fit inside the image,
    centered so margins are symmetric."""
    half = cfg.match_window // 2

    def _axis(size: int) -> list[int]:
        lo, hi = half, size - 1 - half
        if hi < lo:
            return []
        span = hi - lo
        margin = (span % cfg.grid_spacing) // 2
        return list(range(lo + margin, hi + 1, cfg.grid_spacing))

    return [(x, y) for y in _axis(height) for x in _axis(width)]


def cam_slice(
    prev: Image, cur: Image, nxt: Image, cfg: CamConfig
) -> tuple[float, int]:
    """CAM of ``cur`` between its two neighbors.

    Returns (cam, count); cam is nan when no control point is confident in
    both directions.
    """
    if not (
        prev.width == cur.width == nxt.width
        and prev.height == cur.height == nxt.height
    ):
        raise ValueError("slices must share dimensions")
    total = 0.0
    count = 0
    for point in control_grid(cur.width, cur.height, cfg):
        v_prev, c_prev = find_correspondence(cur, prev, point, cfg)
        v_next, c_next = find_correspondence(cur, nxt, point, cfg)
        if min(c_prev, c_next) > cfg.tau:
            total += float(np.hypot(*(v_prev + v_next)))
            count += 1
    if count == 0:
        return math.nan, 0
    return total / count, count


def cam_stack(slices: list[Image], cfg: CamConfig, slice_map=map) -> CamResult:
    """CAM for every interior slice plus stack mean/std.

    ``slice_map`` may be an executor's map; per-slice results are collected
    in order so the output does not depend on scheduling.
    """
    if len(slices) < 3:
        raise ValueError("need at least 3 slices")

    def _one(k: int) -> tuple[int, float, int]:
        cam, count = cam_slice(slices[k - 1], slices[k], slices[k + 1], cfg)
        return k + 1, cam, count

    per_slice = tuple(slice_map(_one, range(1, len(slices) - 1)))
    values = [cam for _, cam, count in per_slice if count > 0]
    if values:
        mean = float(np.mean(values))
        std = float(np.std(values))
    else:
        mean = math.nan
        std = math.nan
    return CamResult(per_slice, mean, std)


def write_cam_csv(path, result: CamResult) -> None:
    lines = ["slice,cam,count\n"]
    for index, cam, count in result.per_slice:
        cam_text = "" if count == 0 else repr(cam)
        lines.append("%d,%s,%d\n" % (index, cam_text, count))
    lines.append("mean,%s,\n" % ("" if math.isnan(result.mean) else repr(result.mean)))
    lines.append("std,%s,\n" % ("" if math.isnan(result.std) else repr(result.std)))
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_cam_csv(path) -> CamResult:
    per_slice = []
    mean = math.nan
    std = math.nan
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "slice,cam,count":
            raise ValueError(f"not a cam csv: {path}")
        for line in fh:
            key, cam_text, count_text = line.rstrip("\n").split(",")
            value = math.nan if cam_text == "" else float(cam_text)
            if key == "mean":
                mean = value
            elif key == "std":
                std = value
            else:
                per_slice.append((int(key), value, int(count_text)))
    return CamResult(tuple(per_slice), mean, std)
