"""Synthetic section stacks with exact ground truth.

The anatomy is a set of nested, rotated ellipses with soft edges whose radii
and centers drift smoothly from slice to slice.  Interiors carry gentle
intensity ramps plus a low-amplitude sinusoidal texture so both edgeness and
block matching have structure to lock onto, while the background stays flat
and near-black.  Each slice is then perturbed by a known affine transform,
a known smooth displacement field, and a gain/bias intensity change; tears,
holes, and noise can be injected on selected slices.  Everything is a
deterministic function of the seed, and the exact transforms, displacement
fields, and pre-distortion images are returned alongside the stack.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from histostack.image import Image
from histostack.imageio import read_pgm, write_pgm
from histostack.transform import (
    Affine2D,
    LocalAffineField,
    format_affine,
    invert,
    parse_affine,
    read_field,
    write_field,
)

_DISTORTION_KINDS = ("tear", "hole", "noise")
_TEAR_HALF_ANGLE = math.radians(12.0)
_TEXTURE_PERIODS = (23.0, 17.0)
_TEXTURE_AMPLITUDE = 6.0
_BACKGROUND_LEVEL = 4.0
_ELLIPSE_LEVELS = (65.0, 100.0, 135.0, 88.0, 118.0)
_RAMP_MAGNITUDE = 12.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 256
    height: int = 256
    slice_count: int = 10
    seed: int = 0
    ellipse_count: int = 3
    drift: float = 0.10
    max_rotation_deg: float = 0.0
    max_translation: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    max_shear: float = 0.0
    elastic_amplitude: float = 0.0
    elastic_period: float = 96.0
    gain_range: tuple[float, float] = (1.0, 1.0)
    bias_range: tuple[float, float] = (0.0, 0.0)
    distortions: tuple[tuple[int, str, float], ...] = ()
    max_gray: int = 255
    # explicit per-slice schedules; when given they override the random draws
    transforms: tuple[Affine2D, ...] | None = None
    gains: tuple[float, ...] | None = None
    biases: tuple[float, ...] | None = None
    elastic_amplitudes: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("phantom must be at least 32x32")
        if self.slice_count < 1:
            raise ValueError("slice_count must be >= 1")
        if not 1 <= self.ellipse_count <= len(_ELLIPSE_LEVELS):
            raise ValueError(
                f"ellipse_count must be in 1..{len(_ELLIPSE_LEVELS)}"
            )
        for slice_index, kind, magnitude in self.distortions:
            if kind not in _DISTORTION_KINDS:
                raise ValueError(f"unknown distortion kind {kind!r}")
            if not 1 <= slice_index <= self.slice_count:
                raise ValueError(
                    f"distortion slice index {slice_index} out of range"
                )
            if magnitude < 0:
                raise ValueError("distortion magnitude must be non-negative")
        for name in ("transforms", "gains", "biases", "elastic_amplitudes"):
            values = getattr(self, name)
            if values is not None and len(values) != self.slice_count:
                raise ValueError(f"{name} override must have one entry per slice")


@dataclass(frozen=True)
class GroundTruth:
    """Exact per-slice generation record.

    ``transforms`` are the forward affines applied to each slice (observed =
    warp(base, transform)); ``fields`` hold the (h, w, 2) displacement
    (ux, uy) sampled in the observed frame; ``clean`` are the slices after
    geometry and intensity changes but before tears/holes/noise.
    """

    transforms: tuple[Affine2D, ...]
    fields: tuple[np.ndarray, ...]
    clean: tuple[Image, ...]
    gains: tuple[float, ...]
    biases: tuple[float, ...]


@dataclass(frozen=True)
class _Anatomy:
    centers: tuple[tuple[float, float], ...]
    radii: tuple[tuple[float, float], ...]
    angles: tuple[float, ...]
    levels: tuple[float, ...]
    ramp_dirs: tuple[tuple[float, float], ...]
    drift: float
    drift_dir: tuple[float, float]
    texture_phases: tuple[float, float]


def random_affine(
    rng: np.random.Generator,
    width: int,
    height: int,
    max_rotation_deg: float,
    max_translation: float,
    scale_range: tuple[float, float],
    max_shear: float = 0.0,
) -> Affine2D:
    """Random rotation/scale/shear about the image center plus translation."""
    theta = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    sx = rng.uniform(scale_range[0], scale_range[1])
    sy = rng.uniform(scale_range[0], scale_range[1])
    shear = rng.uniform(-max_shear, max_shear)
    tx = rng.uniform(-max_translation, max_translation)
    ty = rng.uniform(-max_translation, max_translation)
    c, s = math.cos(theta), math.sin(theta)
    linear = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear * sx], [0.0, sy]])
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    t = center - linear @ center + np.array([tx, ty])
    return Affine2D(linear, t)


def _make_anatomy(rng: np.random.Generator, spec: PhantomSpec) -> _Anatomy:
    min_dim = min(spec.width, spec.height)
    cx0 = (spec.width - 1) / 2.0
    cy0 = (spec.height - 1) / 2.0
    centers = []
    radii = []
    angles = []
    levels = []
    ramp_dirs = []
    for k in range(spec.ellipse_count):
        shrink = 1.0 - 0.26 * k
        rx = 0.38 * min_dim * shrink * rng.uniform(0.95, 1.05)
        ry = 0.32 * min_dim * shrink * rng.uniform(0.95, 1.05)
        jitter = 0.0 if k == 0 else 0.05 * min_dim
        centers.append(
            (cx0 + rng.uniform(-jitter, jitter), cy0 + rng.uniform(-jitter, jitter))
        )
        radii.append((rx, ry))
        angles.append(rng.uniform(0.0, math.pi))
        levels.append(_ELLIPSE_LEVELS[k] + rng.uniform(-5.0, 5.0))
        phi = rng.uniform(0.0, 2.0 * math.pi)
        ramp_dirs.append((math.cos(phi), math.sin(phi)))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return _Anatomy(
        tuple(centers),
        tuple(radii),
        tuple(angles),
        tuple(levels),
        tuple(ramp_dirs),
        spec.drift,
        (math.cos(phi), math.sin(phi)),
        (rng.uniform(0.0, 2.0 * math.pi), rng.uniform(0.0, 2.0 * math.pi)),
    )


def _render_anatomy(
    qx: np.ndarray, qy: np.ndarray, anatomy: _Anatomy, z_frac: float, min_dim: float
) -> np.ndarray:
    """Evaluate the anatomy as a continuous function of (sub)pixel coords."""
    out = np.full(qx.shape, _BACKGROUND_LEVEL)
    shift = anatomy.drift * (z_frac - 0.5)
    alpha_outer = None
    for k in range(len(anatomy.radii)):
        rx, ry = anatomy.radii[k]
        rx *= 1.0 + shift
        ry *= 1.0 + shift
        cx = anatomy.centers[k][0] + anatomy.drift_dir[0] * shift * 0.25 * min_dim
        cy = anatomy.centers[k][1] + anatomy.drift_dir[1] * shift * 0.25 * min_dim
        ca, sa = math.cos(anatomy.angles[k]), math.sin(anatomy.angles[k])
        ux = (qx - cx) * ca + (qy - cy) * sa
        uy = -(qx - cx) * sa + (qy - cy) * ca
        f = (ux / rx) ** 2 + (uy / ry) ** 2
        alpha = np.clip((1.0 - f) * (min(rx, ry) / 3.0), 0.0, 1.0)
        gx, gy = anatomy.ramp_dirs[k]
        value = anatomy.levels[k] + _RAMP_MAGNITUDE * (
            ((qx - cx) * gx + (qy - cy) * gy) / min_dim
        )
        out = out * (1.0 - alpha) + value * alpha
        if alpha_outer is None:
            alpha_outer = alpha
    px, py = _TEXTURE_PERIODS
    fx, fy = anatomy.texture_phases
    texture = _TEXTURE_AMPLITUDE * np.sin(
        2.0 * math.pi * qx / px + fx
    ) * np.sin(2.0 * math.pi * qy / py + fy)
    return out + alpha_outer * texture


def _expand_distortions(rng: np.random.Generator, spec: PhantomSpec):
    """Draw every random distortion parameter up front so later rendering is
    a pure function (and could run per-slice in parallel)."""
    expanded: dict[int, list] = {}
    for slice_index, kind, magnitude in spec.distortions:
        params: dict = {"kind": kind, "magnitude": magnitude}
        if kind == "tear":
            edge = int(rng.integers(0, 4))
            along = rng.uniform(0.25, 0.75)
            if edge == 0:
                anchor = (along * (spec.width - 1), 0.0)
                direction = (0.0, 1.0)
            elif edge == 1:
                anchor = (along * (spec.width - 1), float(spec.height - 1))
                direction = (0.0, -1.0)
            elif edge == 2:
                anchor = (0.0, along * (spec.height - 1))
                direction = (1.0, 0.0)
            else:
                anchor = (float(spec.width - 1), along * (spec.height - 1))
                direction = (-1.0, 0.0)
            skew = rng.uniform(-0.35, 0.35)
            dx, dy = direction
            dx, dy = dx + skew * dy, dy + skew * dx
            norm = math.hypot(dx, dy)
            params["anchor"] = anchor
            params["direction"] = (dx / norm, dy / norm)
        elif kind == "hole":
            params["center"] = (
                rng.uniform(0.35, 0.65) * (spec.width - 1),
                rng.uniform(0.35, 0.65) * (spec.height - 1),
            )
        else:
            params["noise"] = rng.normal(
                0.0, magnitude, size=(spec.height, spec.width)
            )
        expanded.setdefault(slice_index, []).append(params)
    return expanded


def _apply_distortions(values: np.ndarray, entries: list, max_gray: int) -> np.ndarray:
    ys, xs = np.mgrid[0 : values.shape[0], 0 : values.shape[1]].astype(np.float64)
    out = values.copy()
    for params in entries:
        kind = params["kind"]
        if kind == "noise":
            out = np.clip(out + params["noise"], 0.0, max_gray)
        elif kind == "hole":
            cx, cy = params["center"]
            r = params["magnitude"]
            out[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = 0.0
        else:
            ax, ay = params["anchor"]
            dx, dy = params["direction"]
            vx = xs - ax
            vy = ys - ay
            dist = np.hypot(vx, vy)
            with np.errstate(invalid="ignore", divide="ignore"):
                cosang = np.where(dist > 0, (vx * dx + vy * dy) / dist, 1.0)
            wedge = (dist <= params["magnitude"]) & (
                cosang >= math.cos(_TEAR_HALF_ANGLE)
            )
            out[wedge] = 0.0
    return out


def generate(spec: PhantomSpec) -> tuple[list[Image], GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    anatomy = _make_anatomy(rng, spec)
    min_dim = float(min(spec.width, spec.height))

    # schedule expansion (sequential; consumes the rng in a fixed order)
    if spec.transforms is not None:
        transforms = tuple(spec.transforms)
    else:
        transforms = tuple(
            random_affine(
                rng,
                spec.width,
                spec.height,
                spec.max_rotation_deg,
                spec.max_translation,
                spec.scale_range,
                spec.max_shear,
            )
            for _ in range(spec.slice_count)
        )
    amplitudes = (
        tuple(spec.elastic_amplitudes)
        if spec.elastic_amplitudes is not None
        else (spec.elastic_amplitude,) * spec.slice_count
    )
    phases = tuple(
        (rng.uniform(0.0, 2.0 * math.pi), rng.uniform(0.0, 2.0 * math.pi))
        for _ in range(spec.slice_count)
    )
    gains = (
        tuple(spec.gains)
        if spec.gains is not None
        else tuple(
            rng.uniform(spec.gain_range[0], spec.gain_range[1])
            for _ in range(spec.slice_count)
        )
    )
    biases = (
        tuple(spec.biases)
        if spec.biases is not None
        else tuple(
            rng.uniform(spec.bias_range[0], spec.bias_range[1])
            for _ in range(spec.slice_count)
        )
    )
    distortions = _expand_distortions(rng, spec)

    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    observed = []
    fields = []
    clean = []
    for z in range(spec.slice_count):
        z_frac = z / (spec.slice_count - 1) if spec.slice_count > 1 else 0.5
        amp = amplitudes[z]
        ux = amp * np.sin(2.0 * math.pi * ys / spec.elastic_period + phases[z][0])
        uy = amp * np.sin(2.0 * math.pi * xs / spec.elastic_period + phases[z][1])
        inv = invert(transforms[z])
        px = xs + ux
        py = ys + uy
        qx = inv.m[0, 0] * px + inv.m[0, 1] * py + inv.t[0]
        qy = inv.m[1, 0] * px + inv.m[1, 1] * py + inv.t[1]
        geom = _render_anatomy(qx, qy, anatomy, z_frac, min_dim)
        values = np.clip(gains[z] * geom + biases[z], 0.0, spec.max_gray)
        clean_img = Image(
            np.rint(values).astype(np.uint16), spec.max_gray
        )
        distorted = _apply_distortions(
            values, distortions.get(z + 1, []), spec.max_gray
        )
        observed.append(Image(np.rint(distorted).astype(np.uint16), spec.max_gray))
        fields.append(np.stack([ux, uy], axis=-1))
        clean.append(clean_img)

    truth = GroundTruth(transforms, tuple(fields), tuple(clean), gains, biases)
    return observed, truth


def displacement_to_field(u: np.ndarray) -> LocalAffineField:
    """Package an (h, w, 2) displacement as a local affine sampling field
    (identity matrix part, displacement as translation)."""
    h, w = u.shape[:2]
    params = np.zeros((h, w, 6))
    params[:, :, 0] = 1.0
    params[:, :, 3] = 1.0
    params[:, :, 4] = u[:, :, 0]
    params[:, :, 5] = u[:, :, 1]
    return LocalAffineField(params)


def write_stack(directory, images: list[Image], prefix: str = "slice") -> str:
    """Write numbered PGMs plus a tab-separated manifest; returns the
    manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for k, img in enumerate(images, start=1):
        name = f"{prefix}_{k:04d}.pgm"
        write_pgm(os.path.join(directory, name), img)
        lines.append(f"{k}\t{name}\n")
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.writelines(lines)
    return manifest


def save_ground_truth(directory, truth: GroundTruth) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "gt_transforms.txt"), "w") as fh:
        for k, t in enumerate(truth.transforms, start=1):
            fh.write(f"{k} {format_affine(t)}\n")
    with open(os.path.join(directory, "gt_intensity.txt"), "w") as fh:
        for k in range(len(truth.gains)):
            fh.write(f"{k + 1} {truth.gains[k]!r} {truth.biases[k]!r}\n")
    for k, u in enumerate(truth.fields, start=1):
        write_field(
            os.path.join(directory, f"gt_field_{k:04d}.laf"),
            displacement_to_field(u),
        )
    for k, img in enumerate(truth.clean, start=1):
        write_pgm(os.path.join(directory, f"gt_clean_{k:04d}.pgm"), img)


def load_ground_truth(directory) -> GroundTruth:
    transforms = []
    with open(os.path.join(directory, "gt_transforms.txt")) as fh:
        for line in fh:
            _, rest = line.split(" ", 1)
            transforms.append(parse_affine(rest))
    gains = []
    biases = []
    with open(os.path.join(directory, "gt_intensity.txt")) as fh:
        for line in fh:
            _, g, b = line.split()
            gains.append(float(g))
            biases.append(float(b))
    fields = []
    clean = []
    for k in range(1, len(transforms) + 1):
        laf = read_field(os.path.join(directory, f"gt_field_{k:04d}.laf"))
        ux, uy = laf.displacement()
        fields.append(np.stack([ux, uy], axis=-1))
        clean.append(read_pgm(os.path.join(directory, f"gt_clean_{k:04d}.pgm")))
    return GroundTruth(
        tuple(transforms), tuple(fields), tuple(clean), tuple(gains), tuple(biases)
    )
