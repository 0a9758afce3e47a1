"""Pairwise slice registration.

Three estimators share a coarse-to-fine framework:

* ``register_affine``: 6-parameter global affine minimizing the mean squared
  error between edgeness maps (feature space), by Gauss-Newton on the
  linearized constancy residual.
* ``register_rigid``: the same optimizer constrained to rotation plus
  translation (3 DOF), used for inter-subvolume chaining.
* ``register_lags``: locally affine, globally smooth elastic refinement.
  Each block gets its own 6 geometric parameters estimated by least squares
  on the image-space residual, coupled to its neighbors by a quadratic
  smoothness penalty; the two brightness/contrast parameters of the full
  8-parameter local model are omitted because standardization has already
  removed intensity variation.

Every iteration warps the original (per-level) source image with the current
total transform, optionally re-standardizing the warped result so intensity
drift introduced by interpolation cannot accumulate.  A Gauss-Newton step is
only accepted if it actually lowers the objective; after three consecutive
iterations without an accepting step the best result so far is returned with
``converged=False``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from histostack.image import (
    Image,
    build_pyramid,
    max_pyramid_levels,
    sample_grid,
    warp_arrays,
)
from histostack.features import disk_offsets, edgeness_values
from histostack.standardize import (
    DegenerateHistogramError,
    NotBimodalError,
    StandardScale,
    extract_landmarks,
    _map_values,
)
from histostack.transform import (
    Affine2D,
    LocalAffineField,
    compose,
    compose_affine_into_field,
    invert,
)

logger = logging.getLogger(__name__)

_DIVERGENCE_PATIENCE = 3
_STEP_SCALES = (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625)
_DET_BOUNDS = (0.1, 10.0)
_SMOOTH_KERNEL = np.array([0.25, 0.5, 0.25])


class DegenerateTextureError(Exception):
    pass


class InsufficientOverlapError(Exception):
    pass


@dataclass
class RegistrationConfig:
    pyramid_levels: int = 4
    max_iterations: int = 50
    convergence_tol: float = 1e-4
    r_f: float = 3
    lags_block_size: int = 32
    lags_smoothness_weight: float = 10.0
    lags_outer_iterations: int = 5
    min_overlap: float = 0.25
    standard_scale: StandardScale | None = None

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if self.lags_block_size < 8:
            raise ValueError("lags_block_size must be >= 8")
        if self.lags_smoothness_weight < 0:
            raise ValueError("lags_smoothness_weight must be non-negative")


@dataclass
class RegistrationResult:
    transform: Affine2D | LocalAffineField
    final_mse: float
    iterations_used: int
    converged: bool
    log: list[tuple[int, int, float]] = field(default_factory=list)


def _pad_to_common(a: Image, b: Image) -> tuple[Image, Image]:
    """Zero-pad the smaller image bottom/right so both share dimensions."""
    h = max(a.height, b.height)
    w = max(a.width, b.width)

    def _pad(img: Image) -> Image:
        if img.height == h and img.width == w:
            return img
        out = np.zeros((h, w), dtype=np.uint16)
        out[: img.height, : img.width] = img.pixels
        return Image(out, img.max_gray, img.pixel_size_um)

    return _pad(a), _pad(b)


def _photometric_lut(
    values: np.ndarray, scale: StandardScale | None
) -> np.ndarray | None:
    """Standardization lookup table for a warped image, or None when the
    scale is unset or the content no longer supports landmark extraction.

    The table is built once per pyramid level and reused across iterations
    so the registration objective stays smooth in the geometric parameters.
    The mapped values are kept continuous (unrounded).
    """
    if scale is None:
        return None
    ints = np.clip(np.rint(values), 0, 65535).astype(np.uint16)
    img = Image(ints, max(int(ints.max()), 1))
    try:
        lm = extract_landmarks(img, scale)
    except (DegenerateHistogramError, NotBimodalError):
        return None
    return np.clip(
        _map_values(np.arange(img.max_gray + 1, dtype=np.float64), lm, scale), 0, None
    )


def _apply_lut(values: np.ndarray, lut: np.ndarray | None) -> np.ndarray:
    if lut is None:
        return values
    ints = np.clip(np.rint(values), 0, len(lut) - 1).astype(np.intp)
    return lut[ints]


def _smooth(values: np.ndarray) -> np.ndarray:
    """Separable 3-tap binomial smoothing with edge replication."""
    padded = np.pad(values, 1, mode="edge")
    horiz = (
        _SMOOTH_KERNEL[0] * padded[1:-1, :-2]
        + _SMOOTH_KERNEL[1] * padded[1:-1, 1:-1]
        + _SMOOTH_KERNEL[2] * padded[1:-1, 2:]
    )
    padded = np.pad(horiz, ((1, 1), (0, 0)), mode="edge")
    return (
        _SMOOTH_KERNEL[0] * padded[:-2, :]
        + _SMOOTH_KERNEL[1] * padded[1:-1, :]
        + _SMOOTH_KERNEL[2] * padded[2:, :]
    )


def _gradients(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients of the binomially smoothed input."""
    s = _smooth(values)
    gy, gx = np.gradient(s)
    return gx, gy


def _erode_mask(mask: np.ndarray, r_f: float) -> np.ndarray:
    """Shrink a validity mask so edgeness disks never mix invalid pixels."""
    out = mask.copy()
    h, w = mask.shape
    for dy, dx in disk_offsets(r_f):
        sy0, sy1 = max(0, dy), h + min(0, dy)
        sx0, sx1 = max(0, dx), w + min(0, dx)
        dy0, dy1 = max(0, -dy), h + min(0, -dy)
        dx0, dx1 = max(0, -dx), w + min(0, -dx)
        region = np.zeros_like(mask)
        region[dy0:dy1, dx0:dx1] = mask[sy0:sy1, sx0:sx1]
        out &= region
    return out


def _scale_to_level(t: Affine2D, scale: int) -> Affine2D:
    return Affine2D(t.m, t.t / scale)


def _scale_from_level(t: Affine2D, scale: int) -> Affine2D:
    return Affine2D(t.m, t.t * scale)


def _delta_transform(params: np.ndarray, model: str, step: float) -> Affine2D:
    p = params * step
    if model == "rigid":
        dtheta, tx, ty = p
        c, s = math.cos(dtheta), math.sin(dtheta)
        return Affine2D(np.array([[c, -s], [s, c]]), np.array([tx, ty]))
    a, b, c, d, tx, ty = p
    return Affine2D(np.array([[1.0 + a, b], [c, 1.0 + d]]), np.array([tx, ty]))


def _solve_normal_equations(g_rows: np.ndarray, residual: np.ndarray) -> np.ndarray:
    hess = g_rows @ g_rows.T
    rhs = g_rows @ residual
    try:
        step = np.linalg.solve(hess, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateTextureError("degenerate texture") from None
    if not np.all(np.isfinite(step)):
        raise DegenerateTextureError("degenerate texture")
    return step


def _feature_objective(
    src_pixels: np.ndarray,
    tgt_feat: np.ndarray,
    t: Affine2D,
    cfg: RegistrationConfig,
    lut: np.ndarray | None,
):
    """Warp source, re-standardize through the level's frozen lookup table,
    and measure feature-space MSE.

    Returns (mse, warped feature map, eroded mask).  The mask excludes
    pixels whose edgeness disk touches out-of-domain samples.
    """
    warped, mask = warp_arrays(src_pixels, t)
    if mask.mean() < cfg.min_overlap:
        raise InsufficientOverlapError("insufficient overlap")
    feat = edgeness_values(_apply_lut(warped, lut), cfg.r_f)
    eroded = _erode_mask(mask, cfg.r_f)
    if not eroded.any():
        raise InsufficientOverlapError("insufficient overlap")
    diff = feat[eroded] - tgt_feat[eroded]
    return float(np.mean(diff * diff)), feat, eroded


def _register_parametric(
    source: Image,
    target: Image,
    cfg: RegistrationConfig,
    model: str,
    init: Affine2D | None = None,
) -> RegistrationResult:
    source, target = _pad_to_common(source, target)
    levels = min(cfg.pyramid_levels, max_pyramid_levels(source.width, source.height))
    pyr_src = build_pyramid(source, levels)
    pyr_tgt = build_pyramid(target, levels)

    t_full = init if init is not None else Affine2D.identity()
    total_iterations = 0
    converged = False
    final_mse = math.inf
    log: list[tuple[int, int, float]] = []

    for level in range(levels - 1, -1, -1):
        scale = 2**level
        src_px = pyr_src[level].as_float()
        tgt_vals = pyr_tgt[level].as_float()
        tgt_feat = edgeness_values(
            _apply_lut(tgt_vals, _photometric_lut(tgt_vals, cfg.standard_scale)),
            cfg.r_f,
        )
        xs, ys = np.meshgrid(
            np.arange(src_px.shape[1], dtype=np.float64),
            np.arange(src_px.shape[0], dtype=np.float64),
        )

        t_level = _scale_to_level(t_full, scale)
        warped0, _ = warp_arrays(src_px, t_level)
        lut = _photometric_lut(warped0, cfg.standard_scale)
        mse, feat, mask = _feature_objective(src_px, tgt_feat, t_level, cfg, lut)
        log.append((level, 0, mse))
        converged = mse == 0.0
        fail_streak = 0

        for iteration in range(1, cfg.max_iterations + 1):
            if converged:
                break
            gx, gy = _gradients(feat)
            gxm, gym = gx[mask], gy[mask]
            xm, ym = xs[mask], ys[mask]
            if model == "rigid":
                g_rows = np.stack([gxm * (-ym) + gym * xm, gxm, gym])
            else:
                g_rows = np.stack([gxm * xm, gxm * ym, gym * xm, gym * ym, gxm, gym])
            residual = feat[mask] - tgt_feat[mask]
            params = _solve_normal_equations(g_rows, residual)

            accepted = False
            best_rejected = math.inf
            for step in _STEP_SCALES:
                candidate = compose(_delta_transform(params, model, step), t_level)
                det = abs(candidate.det)
                if not (_DET_BOUNDS[0] <= det <= _DET_BOUNDS[1]):
                    continue
                try:
                    cand_mse, cand_feat, cand_mask = _feature_objective(
                        src_px, tgt_feat, candidate, cfg, lut
                    )
                except InsufficientOverlapError:
                    continue
                if cand_mse < mse:
                    rel_change = (mse - cand_mse) / max(mse, np.finfo(float).tiny)
                    t_level, mse, feat, mask = candidate, cand_mse, cand_feat, cand_mask
                    total_iterations += 1
                    log.append((level, iteration, mse))
                    converged = rel_change < cfg.convergence_tol or mse == 0.0
                    accepted = True
                    break
                best_rejected = min(best_rejected, cand_mse)
            if accepted:
                fail_streak = 0
                continue
            # no step improved: a plateau (best candidate within tolerance of
            # the current MSE) is convergence; anything worse counts toward
            # divergence
            if best_rejected <= mse * (1.0 + cfg.convergence_tol):
                converged = True
                break
            fail_streak += 1
            if fail_streak >= _DIVERGENCE_PATIENCE:
                logger.debug(
                    "registration diverged at level %d after %d iterations",
                    level,
                    iteration,
                )
                break

        t_full = _scale_from_level(t_level, scale)
        final_mse = mse

    return RegistrationResult(t_full, final_mse, total_iterations, converged, log)


def register_affine(source: Image, target: Image, cfg: RegistrationConfig) -> RegistrationResult:
    """Global affine registration minimizing feature-space (edgeness) MSE."""
    return _register_parametric(source, target, cfg, "affine")


def register_rigid(source: Image, target: Image, cfg: RegistrationConfig) -> RegistrationResult:
    """Rotation + translation registration, same objective as affine."""
    return _register_parametric(source, target, cfg, "rigid")


# --- locally affine, globally smooth elastic refinement ---


def _block_layout(h: int, w: int, block: int):
    """Block extents and centers covering the image; the last row/column of
    blocks may be smaller."""
    nby = max(1, math.ceil(h / block))
    nbx = max(1, math.ceil(w / block))
    y_edges = [min(i * block, h) for i in range(nby)] + [h]
    x_edges = [min(i * block, w) for i in range(nbx)] + [w]
    cy = np.array([(y_edges[i] + y_edges[i + 1] - 1) / 2.0 for i in range(nby)])
    cx = np.array([(x_edges[i] + x_edges[i + 1] - 1) / 2.0 for i in range(nbx)])
    return nby, nbx, y_edges, x_edges, cy, cx


def _dense_displacement(
    params: np.ndarray,
    cy: np.ndarray,
    cx: np.ndarray,
    h: int,
    w: int,
    with_matrix: bool = False,
):
    """Bilinearly blend per-block local affine parameters into a per-pixel
    displacement field (and optionally the blended 2x2 matrix part)."""
    nby, nbx = params.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def _axis_index(coords, centers):
        n = len(centers)
        if n == 1:
            i0 = np.zeros_like(coords, dtype=np.intp)
            return i0, i0, np.zeros_like(coords)
        idx = np.interp(coords, centers, np.arange(n, dtype=np.float64))
        i0 = np.clip(np.floor(idx).astype(np.intp), 0, n - 2)
        frac = idx - i0
        return i0, i0 + 1, frac

    jy0, jy1, fy = _axis_index(ys, cy)
    jx0, jx1, fx = _axis_index(xs, cx)

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    ux = np.zeros((h, w))
    uy = np.zeros((h, w))
    dmat = np.zeros((h, w, 4)) if with_matrix else None
    for jy, jx, wgt in (
        (jy0, jx0, w00),
        (jy0, jx1, w01),
        (jy1, jx0, w10),
        (jy1, jx1, w11),
    ):
        p = params[jy, jx]  # (h, w, 6)
        dxc = xs - cx[jx]
        dyc = ys - cy[jy]
        ux += wgt * (p[:, :, 0] * dxc + p[:, :, 1] * dyc + p[:, :, 4])
        uy += wgt * (p[:, :, 2] * dxc + p[:, :, 3] * dyc + p[:, :, 5])
        if with_matrix:
            for k in range(4):
                dmat[:, :, k] += wgt * p[:, :, k]
    if with_matrix:
        return ux, uy, dmat
    return ux, uy


def _elastic_warp(
    src_px: np.ndarray,
    sampling: Affine2D,
    params: np.ndarray,
    cy: np.ndarray,
    cx: np.ndarray,
    shape: tuple[int, int],
):
    h, w = shape
    ux, uy = _dense_displacement(params, cy, cx, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs + ux
    py = ys + uy
    qx = sampling.m[0, 0] * px + sampling.m[0, 1] * py + sampling.t[0]
    qy = sampling.m[1, 0] * px + sampling.m[1, 1] * py + sampling.t[1]
    return sample_grid(src_px, qx, qy)


def _lags_objective(
    src_px: np.ndarray,
    tgt_std: np.ndarray,
    sampling: Affine2D,
    params: np.ndarray,
    cy: np.ndarray,
    cx: np.ndarray,
    cfg: RegistrationConfig,
    lut: np.ndarray | None,
):
    """Image-space MSE of the elastically warped source against the target."""
    warped, mask = _elastic_warp(src_px, sampling, params, cy, cx, tgt_std.shape)
    if mask.mean() < cfg.min_overlap:
        raise InsufficientOverlapError("insufficient overlap")
    ws = _apply_lut(warped, lut)
    diff = ws[mask] - tgt_std[mask]
    return float(np.mean(diff * diff)), ws, mask


def _lags_sweep(
    params: np.ndarray,
    ws: np.ndarray,
    tgt_std: np.ndarray,
    mask: np.ndarray,
    layout,
    cfg: RegistrationConfig,
) -> np.ndarray:
    """One linearized update of all block parameters.

    Minimizes the per-block normalized data terms plus the smoothness
    penalty lambda * sum over neighbor pairs of the weighted squared
    parameter difference, solving the coupled system exactly so a uniform
    motion (zero smoothness cost) is not damped.  Blocks with no usable
    gradient energy carry no data term and simply inherit the smooth
    interpolation of their neighbors.
    """
    nby, nbx, y_edges, x_edges, cy, cx = layout
    gx, gy = _gradients(ws)
    rhs_img = tgt_std - ws

    sigma_g = float(np.mean(gx[mask] ** 2 + gy[mask] ** 2)) if mask.any() else 0.0
    half = max(cfg.lags_block_size / 2.0, 1.0)
    weight = np.diag([half**2] * 4 + [1.0, 1.0])
    # per-pair stiffness made intensity-scale-free by sigma_g and block-size
    # free by the nominal pixel count, so lambda weighs smoothness against
    # the per-pixel data term
    lam = (
        cfg.lags_smoothness_weight
        * max(sigma_g, np.finfo(float).tiny)
        / float(cfg.lags_block_size**2)
    )

    n_blocks = nby * nbx
    system = np.zeros((6 * n_blocks, 6 * n_blocks))
    rhs = np.zeros(6 * n_blocks)
    for by in range(nby):
        for bx in range(nbx):
            b = by * nbx + bx
            sl = slice(6 * b, 6 * b + 6)
            ysl = slice(y_edges[by], y_edges[by + 1])
            xsl = slice(x_edges[bx], x_edges[bx + 1])
            m = mask[ysl, xsl]
            if m.any():
                ys_b, xs_b = np.mgrid[ysl, xsl].astype(np.float64)
                dxc = (xs_b - cx[bx])[m]
                dyc = (ys_b - cy[by])[m]
                gxm = gx[ysl, xsl][m]
                gym = gy[ysl, xsl][m]
                rows = np.stack(
                    [gxm * dxc, gxm * dyc, gym * dxc, gym * dyc, gxm, gym]
                )
                n = rows.shape[1]
                hess = rows @ rows.T / n
                system[sl, sl] += hess
                rhs[sl] += hess @ params[by, bx] + rows @ rhs_img[ysl, xsl][m] / n
            for nb_y, nb_x in ((by + 1, bx), (by, bx + 1)):
                if nb_y >= nby or nb_x >= nbx:
                    continue
                nb = nb_y * nbx + nb_x
                nsl = slice(6 * nb, 6 * nb + 6)
                system[sl, sl] += lam * weight
                system[nsl, nsl] += lam * weight
                system[sl, nsl] -= lam * weight
                system[nsl, sl] -= lam * weight
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        return params.copy()
    if not np.all(np.isfinite(solution)):
        return params.copy()
    return solution.reshape(nby, nbx, 6)


def _upscale_block_params(params: np.ndarray, coarse_layout, fine_layout) -> np.ndarray:
    """Carry block parameters to the next finer level: positions double, so
    translations double while the dimensionless matrix parts carry over."""
    _, _, _, _, cy_c, cx_c = coarse_layout
    nby_f, nbx_f, _, _, cy_f, cx_f = fine_layout
    out = np.zeros((nby_f, nbx_f, 6))

    def _axis(coords, centers):
        n = len(centers)
        if n == 1:
            z = np.zeros_like(coords, dtype=np.intp)
            return z, z, np.zeros_like(coords)
        idx = np.interp(coords, centers, np.arange(n, dtype=np.float64))
        i0 = np.clip(np.floor(idx).astype(np.intp), 0, n - 2)
        return i0, i0 + 1, idx - i0

    jy0, jy1, fy = _axis(cy_f / 2.0, cy_c)
    jx0, jx1, fx = _axis(cx_f / 2.0, cx_c)
    for i in range(nby_f):
        for j in range(nbx_f):
            p = (
                (1 - fy[i]) * (1 - fx[j]) * params[jy0[i], jx0[j]]
                + (1 - fy[i]) * fx[j] * params[jy0[i], jx1[j]]
                + fy[i] * (1 - fx[j]) * params[jy1[i], jx0[j]]
                + fy[i] * fx[j] * params[jy1[i], jx1[j]]
            )
            out[i, j] = p
            out[i, j, 4] *= 2.0
            out[i, j, 5] *= 2.0
    return out


def register_lags(
    source: Image,
    target: Image,
    init: Affine2D,
    cfg: RegistrationConfig,
) -> RegistrationResult:
    """Elastic refinement on top of an affine initialization.

    Returns a LocalAffineField covering the *total* transform (affine init
    composed with the elastic refinement), with ``final_mse`` the image-space
    MSE after the elastic warp.
    """
    source, target = _pad_to_common(source, target)
    h, w = target.height, target.width
    sampling_full = invert(init)

    max_lv = 1
    side = min(h, w)
    while (
        max_lv < cfg.pyramid_levels
        and (side + 1) // 2 >= 2 * cfg.lags_block_size
        and (side + 1) // 2 >= 16
    ):
        side = (side + 1) // 2
        max_lv += 1
    pyr_src = build_pyramid(source, max_lv)
    pyr_tgt = build_pyramid(target, max_lv)

    params = None
    prev_layout = None
    total_iterations = 0
    converged = False
    final_mse = math.inf
    log: list[tuple[int, int, float]] = []

    for level in range(max_lv - 1, -1, -1):
        scale = 2**level
        src_px = pyr_src[level].as_float()
        tgt_vals = pyr_tgt[level].as_float()
        tgt_std = _apply_lut(
            tgt_vals, _photometric_lut(tgt_vals, cfg.standard_scale)
        )
        hl, wl = tgt_std.shape
        layout = _block_layout(hl, wl, cfg.lags_block_size)
        nby, nbx = layout[0], layout[1]
        cy, cx = layout[4], layout[5]
        sampling_level = _scale_to_level(sampling_full, scale)

        if params is None:
            params = np.zeros((nby, nbx, 6))
        else:
            params = _upscale_block_params(params, prev_layout, layout)

        warped0, _ = _elastic_warp(
            src_px, sampling_level, params, cy, cx, tgt_std.shape
        )
        lut = _photometric_lut(warped0, cfg.standard_scale)
        mse, ws, mask = _lags_objective(
            src_px, tgt_std, sampling_level, params, cy, cx, cfg, lut
        )
        if np.any(params):
            # never let an upscaled coarse solution start worse than the
            # plain initialization; keeps the final MSE bounded by the
            # affine-only MSE
            zeros = np.zeros_like(params)
            try:
                mse0, ws0, mask0 = _lags_objective(
                    src_px, tgt_std, sampling_level, zeros, cy, cx, cfg, lut
                )
            except InsufficientOverlapError:
                mse0 = math.inf
            if mse0 < mse:
                params, mse, ws, mask = zeros, mse0, ws0, mask0
        log.append((level, 0, mse))
        converged = mse == 0.0
        fail_streak = 0

        for outer in range(1, cfg.lags_outer_iterations + 1):
            if converged:
                break
            candidate = _lags_sweep(params, ws, tgt_std, mask, layout, cfg)
            accepted = False
            best_rejected = math.inf
            for step in _STEP_SCALES:
                trial = params + step * (candidate - params)
                try:
                    trial_mse, trial_ws, trial_mask = _lags_objective(
                        src_px, tgt_std, sampling_level, trial, cy, cx, cfg, lut
                    )
                except InsufficientOverlapError:
                    continue
                if trial_mse < mse:
                    rel_change = (mse - trial_mse) / max(mse, np.finfo(float).tiny)
                    params, mse, ws, mask = trial, trial_mse, trial_ws, trial_mask
                    total_iterations += 1
                    log.append((level, outer, mse))
                    converged = rel_change < cfg.convergence_tol or mse == 0.0
                    accepted = True
                    break
                best_rejected = min(best_rejected, trial_mse)
            if accepted:
                fail_streak = 0
                continue
            if best_rejected <= mse * (1.0 + cfg.convergence_tol):
                converged = True
                break
            fail_streak += 1
            if fail_streak >= _DIVERGENCE_PATIENCE:
                break

        prev_layout = layout
        final_mse = mse

    # assemble the per-pixel total field at full resolution
    layout = _block_layout(h, w, cfg.lags_block_size)
    cy, cx = layout[4], layout[5]
    ux, uy, dmat = _dense_displacement(params, cy, cx, h, w, with_matrix=True)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field_params = np.empty((h, w, 6))
    field_params[:, :, 0] = 1.0 + dmat[:, :, 0]
    field_params[:, :, 1] = dmat[:, :, 1]
    field_params[:, :, 2] = dmat[:, :, 2]
    field_params[:, :, 3] = 1.0 + dmat[:, :, 3]
    # translation chosen so the local affine evaluated at its own pixel
    # reproduces p + u(p) exactly
    field_params[:, :, 4] = (xs + ux) - (field_params[:, :, 0] * xs + field_params[:, :, 1] * ys)
    field_params[:, :, 5] = (ys + uy) - (field_params[:, :, 2] * xs + field_params[:, :, 3] * ys)

    field = compose_affine_into_field(sampling_full, LocalAffineField(field_params))

    return RegistrationResult(field, final_mse, total_iterations, converged, log)
