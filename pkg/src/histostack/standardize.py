"""Intensity standardization onto a learned standard scale.

Section images of the same specimen have bimodal histograms: a near-black
slide background lobe plus a foreground tissue lobe.  Training extracts
per-image histogram landmarks (percentiles p1/p2 and the foreground mode)
and fixes the standard-scale mode as the mean of the training modes mapped
onto [s1, s2].  Transformation remaps any image with two linear segments
that meet at the mode, so equal intensities mean equal tissue afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from histostack.image import Image

logger = logging.getLogger(__name__)

SCALE_FORMAT_TAG = "histostack standard scale v1"

# fraction of the dynamic range above the low percentile below which
# histogram peaks are treated as slide background and ignored
_FOREGROUND_MARGIN = 0.05
_MODE_SMOOTHING_BINS = 5


class DegenerateHistogramError(Exception):
    pass


class NotBimodalError(Exception):
    pass


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.sum() != self.total:
            raise ValueError("histogram counts do not sum to total")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @staticmethod
    def from_image(img: Image) -> "Histogram":
        counts = np.bincount(img.pixels.ravel(), minlength=img.max_gray + 1)
        return Histogram(counts, int(img.pixels.size))


@dataclass(frozen=True)
class LandmarkSet:
    """Histogram landmarks of one image: percentile anchors p1/p2, the
    foreground mode mu, and the min/max gray values present (m1/m2)."""

    p1: int
    p2: int
    mu: int
    m1: int
    m2: int

    def __post_init__(self):
        if not (self.m1 <= self.p1 < self.mu < self.p2 <= self.m2):
            raise ValueError(
                f"landmark ordering violated: m1={self.m1} p1={self.p1} "
                f"mu={self.mu} p2={self.p2} m2={self.m2}"
            )


@dataclass(frozen=True)
class ScaleConfig:
    """Standard-scale parameters fixed before training (everything except
    the trained mode)."""

    s1: int = 1
    s2: int = 4095
    pc1: float = 0.0
    pc2: float = 99.8

    def __post_init__(self):
        if not self.s1 < self.s2:
            raise ValueError("s1 must be < s2")
        if not (0 <= self.pc1 < self.pc2 <= 100):
            raise ValueError("percentiles must satisfy 0 <= pc1 < pc2 <= 100")


@dataclass(frozen=True)
class StandardScale:
    s1: int
    s2: int
    mu_s: int
    pc1: float
    pc2: float

    def __post_init__(self):
        if not (self.s1 < self.mu_s < self.s2):
            raise ValueError("standard scale must satisfy s1 < mu_s < s2")
        if not (0 <= self.pc1 < self.pc2 <= 100):
            raise ValueError("percentiles must satisfy 0 <= pc1 < pc2 <= 100")

    @property
    def config(self) -> ScaleConfig:
        return ScaleConfig(self.s1, self.s2, self.pc1, self.pc2)


def _round_half_up(y):
    return np.floor(np.asarray(y, dtype=np.float64) + 0.5).astype(np.int64)


def percentile_nearest_rank(hist: Histogram, q: float) -> int:
    """Nearest-rank percentile on the cumulative histogram; q=0 gives the
    minimum present, q=100 the maximum."""
    present = np.nonzero(hist.counts)[0]
    if present.size == 0:
        raise DegenerateHistogramError("degenerate histogram")
    if q <= 0:
        return int(present[0])
    rank = min(math.ceil(q / 100.0 * hist.total), hist.total)
    cum = np.cumsum(hist.counts)
    return int(np.searchsorted(cum, rank))


def _smooth_counts(counts: np.ndarray) -> np.ndarray:
    kernel = np.ones(_MODE_SMOOTHING_BINS) / _MODE_SMOOTHING_BINS
    return np.convolve(counts.astype(np.float64), kernel, mode="same")


def extract_landmarks(img: Image, scale: ScaleConfig | StandardScale) -> LandmarkSet:
    """Extract {p1, p2, mu, m1, m2} from an image's histogram.

    The mode is the highest peak of the 5-bin moving-average smoothed
    histogram restricted to intensities above the low percentile plus 5% of
    the dynamic range, which excludes the slide-background lobe.  p1/p2 are
    clamped inward by one gray level if needed to keep them strictly around
    the mode.
    """
    hist = Histogram.from_image(img)
    present = np.nonzero(hist.counts)[0]
    if present.size < 2:
        raise DegenerateHistogramError("degenerate histogram")
    m1, m2 = int(present[0]), int(present[-1])

    p1 = percentile_nearest_rank(hist, scale.pc1)
    p2 = percentile_nearest_rank(hist, scale.pc2)

    smoothed = _smooth_counts(hist.counts)
    threshold = p1 + _FOREGROUND_MARGIN * (m2 - m1)
    lo = int(math.floor(threshold)) + 1  # strictly above the threshold
    hi = min(m2, len(smoothed) - 1)
    if lo > hi:
        raise NotBimodalError("not bimodal")
    segment = smoothed[lo : hi + 1]
    if segment.max() <= 0:
        raise NotBimodalError("not bimodal")
    mu = lo + int(np.argmax(segment))
    if not (m1 < mu < m2):
        raise NotBimodalError("not bimodal")

    if p1 >= mu:
        p1 = mu - 1
    if p2 <= mu:
        p2 = mu + 1
    return LandmarkSet(p1=p1, p2=p2, mu=mu, m1=m1, m2=m2)


def map_mode_to_scale(lm: LandmarkSet, config: ScaleConfig) -> float:
    """Linear map of the mode from [p1, p2] onto [s1, s2]."""
    return config.s1 + (lm.mu - lm.p1) / (lm.p2 - lm.p1) * (config.s2 - config.s1)


def train_scale(training_images: list[Image], config: ScaleConfig) -> StandardScale:
    """Learn the standard-scale mode from a training set.

    Each image's mode is mapped onto [s1, s2] and mu_s is the rounded mean
    of the mapped modes.  Images whose landmark extraction fails are skipped
    with a warning; an empty or fully-skipped set is an error.
    """
    if not training_images:
        raise ValueError("empty training set")
    mapped = []
    for idx, img in enumerate(training_images):
        try:
            lm = extract_landmarks(img, config)
        except (DegenerateHistogramError, NotBimodalError) as exc:
            logger.warning("skipping training image %d: %s", idx, exc)
            continue
        mapped.append(map_mode_to_scale(lm, config))
    if not mapped:
        raise ValueError("all training images failed landmark extraction")
    mu_s = int(_round_half_up(float(np.mean(mapped))))
    mu_s = min(max(mu_s, config.s1 + 1), config.s2 - 1)
    return StandardScale(config.s1, config.s2, mu_s, config.pc1, config.pc2)


def _map_values(x: np.ndarray, lm: LandmarkSet, scale: StandardScale) -> np.ndarray:
    """Two-segment linear map with half-up rounding; x already in [m1, m2]."""
    x = np.asarray(x, dtype=np.float64)
    lower = scale.mu_s + (x - lm.mu) * ((scale.s1 - scale.mu_s) / (lm.p1 - lm.mu))
    upper = scale.mu_s + (x - lm.mu) * ((scale.s2 - scale.mu_s) / (lm.p2 - lm.mu))
    return _round_half_up(np.where(x <= lm.mu, lower, upper))


def map_to_standard(x: int, lm: LandmarkSet, scale: StandardScale) -> int:
    """Map one intensity onto the standard scale.

    Outside [m1, m2] the input is clamped to the nearest endpoint first
    (logged, not fatal).  Exact at the landmarks: p1 -> s1, mu -> mu_s,
    p2 -> s2; monotone non-decreasing everywhere.
    """
    if x < lm.m1 or x > lm.m2:
        clamped = min(max(x, lm.m1), lm.m2)
        logger.warning("intensity %d outside [%d, %d]; clamped to %d", x, lm.m1, lm.m2, clamped)
        x = clamped
    return int(_map_values(np.float64(x), lm, scale))


def extended_range(lm: LandmarkSet, scale: StandardScale) -> tuple[int, int]:
    """The image-specific output range [s1', s2'] that [m1, m2] maps onto."""
    s1p = int(_map_values(np.float64(lm.m1), lm, scale))
    s2p = int(_map_values(np.float64(lm.m2), lm, scale))
    return s1p, s2p


def standardize_image(img: Image, scale: StandardScale) -> Image:
    """Remap every pixel onto the standard scale using the image's own
    landmarks.

    The output keeps the full extended range [s1', s2'] without clipping at
    [s1, s2]; its max_gray is s2'.  Extended values below zero (possible
    only when pc1 > 0) are floored at zero to stay a valid image.
    """
    lm = extract_landmarks(img, scale)
    lut = _map_values(np.arange(img.max_gray + 1), lm, scale)
    lut = np.clip(lut, 0, None)
    max_out = int(lut[lm.m2])
    if max_out > 65535:
        raise ValueError("standardized range exceeds supported 16-bit depth")
    mapped = lut[img.pixels]
    return Image(mapped.astype(np.uint16), max_out, img.pixel_size_um)


def save_scale(path, scale: StandardScale) -> None:
    lines = [
        SCALE_FORMAT_TAG,
        f"s1 {scale.s1}",
        f"s2 {scale.s2}",
        f"mu_s {scale.mu_s}",
        f"pc1 {format(scale.pc1, '.17g')}",
        f"pc2 {format(scale.pc2, '.17g')}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_scale(path) -> StandardScale:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != SCALE_FORMAT_TAG:
        raise ValueError(f"not a standard scale file (missing format tag): {path}")
    kv = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        kv[key] = value
    try:
        return StandardScale(
            s1=int(kv["s1"]),
            s2=int(kv["s2"]),
            mu_s=int(kv["mu_s"]),
            pc1=float(kv["pc1"]),
            pc2=float(kv["pc2"]),
        )
    except KeyError as exc:
        raise ValueError(f"standard scale file missing key {exc}: {path}") from None
