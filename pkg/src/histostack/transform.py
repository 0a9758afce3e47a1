"""Planar affine transforms, serial composition chains, and local affine fields.

Transforms between non-adjacent slices are never estimated directly: they are
resolved on demand as the ordered product of stored consecutive-pair links
(serial composition).  Elastic refinement is represented by a per-pixel
6-parameter local affine field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_SINGULAR_DET = 1e-12
_FIELD_MAGIC = b"HSLAF1\x00\n"


class SingularTransformError(Exception):
    pass


class ChainGapError(Exception):
    pass


@dataclass(frozen=True)
class Affine2D:
    """Planar affine transform mapping a point p to ``m @ p + t``.

    ``m`` is the 2x2 linear part, ``t`` the translation.  Points are (x, y)
    with x along image columns and y along rows.  The six parameters are
    ordered (m1, m2, m3, m4, m5, m6) = (m[0,0], m[0,1], m[1,0], m[1,1],
    t[0], t[1]).
    """

    m: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64)
        if m.shape != (2, 2) or t.shape != (2,):
            raise ValueError("Affine2D needs a 2x2 matrix and a 2-vector")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise ValueError("Affine2D parameters must be finite")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Affine2D":
        return Affine2D(np.eye(2), np.zeros(2))

    @staticmethod
    def translation(tx: float, ty: float) -> "Affine2D":
        return Affine2D(np.eye(2), np.array([tx, ty], dtype=np.float64))

    @staticmethod
    def rotation(theta: float, center: tuple[float, float] | None = None) -> "Affine2D":
        """Rotation by ``theta`` radians, optionally about ``center`` (x, y)."""
        c, s = np.cos(theta), np.sin(theta)
        m = np.array([[c, -s], [s, c]])
        if center is None:
            return Affine2D(m, np.zeros(2))
        cx = np.asarray(center, dtype=np.float64)
        return Affine2D(m, cx - m @ cx)

    @staticmethod
    def from_params(params) -> "Affine2D":
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (6,):
            raise ValueError("expected 6 affine parameters")
        return Affine2D(p[:4].reshape(2, 2), p[4:6])

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.m.ravel(), self.t])

    @property
    def det(self) -> float:
        return float(self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (2,) or (N, 2)."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.m @ p + self.t
        return p @ self.m.T + self.t

    def is_close(self, other: "Affine2D", tol: float = 1e-10) -> bool:
        return bool(
            np.all(np.abs(self.m - other.m) <= tol)
            and np.all(np.abs(self.t - other.t) <= tol)
        )


def compose(outer: Affine2D, inner: Affine2D) -> Affine2D:
    """Serial composition: the result applies ``inner`` first, then ``outer``."""
    return Affine2D(outer.m @ inner.m, outer.m @ inner.t + outer.t)


def invert(t: Affine2D) -> Affine2D:
    if abs(t.det) < _SINGULAR_DET:
        raise SingularTransformError("singular transform")
    m_inv = np.array(
        [[t.m[1, 1], -t.m[0, 1]], [-t.m[1, 0], t.m[0, 0]]]
    ) / t.det
    return Affine2D(m_inv, -(m_inv @ t.t))


class TransformChain:
    """Store of consecutive-pair affine links, resolved by serial composition.

    Links are keyed by the ordered pair (source index, target index) with
    |source - target| == 1; a query between arbitrary indices multiplies the
    stored links along the stack in serial order.
    """

    def __init__(self):
        self._links: dict[tuple[int, int], Affine2D] = {}

    def add_link(self, src: int, dst: int, transform: Affine2D) -> None:
        if abs(src - dst) != 1:
            raise ValueError(f"link {src}->{dst} is not between consecutive slices")
        self._links[(src, dst)] = transform

    def has_link(self, src: int, dst: int) -> bool:
        return (src, dst) in self._links

    def link(self, src: int, dst: int) -> Affine2D:
        try:
            return self._links[(src, dst)]
        except KeyError:
            raise ChainGapError(f"missing transform link {src}->{dst}") from None

    def resolve(self, i: int, j: int) -> Affine2D:
        """Transform warping slice ``i`` into slice ``j``'s frame.

        Composed serially from consecutive links; resolve(i, i) is the
        identity.  Raises ChainGapError naming the first missing link.
        """
        if i == j:
            return Affine2D.identity()
        acc = None
        step = 1 if i < j else -1
        k = i
        while k != j:
            link = self.link(k, k + step)
            acc = link if acc is None else compose(link, acc)
            k += step
        return acc


def chain_resolve(chain: TransformChain, i: int, j: int) -> Affine2D:
    return chain.resolve(i, j)


class LocalAffineField:
    """Per-pixel 6-parameter affine field for elastic warping.

    The parameters are stored as the backward (sampling) map: at output pixel
    p = (x, y) the source is sampled at ``(m1*x + m2*y + m5, m3*x + m4*y +
    m6)``.  Storing the sampling map directly avoids per-pixel inversion when
    warping.  Parameter planes are float64, shape (height, width, 6).
    """

    def __init__(self, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 3 or params.shape[2] != 6:
            raise ValueError("field params must have shape (height, width, 6)")
        if not np.all(np.isfinite(params)):
            raise ValueError("field params must be finite")
        params = params.copy()
        params.setflags(write=False)
        self.params = params

    @property
    def height(self) -> int:
        return self.params.shape[0]

    @property
    def width(self) -> int:
        return self.params.shape[1]

    @staticmethod
    def identity(width: int, height: int) -> "LocalAffineField":
        params = np.zeros((height, width, 6))
        params[:, :, 0] = 1.0
        params[:, :, 3] = 1.0
        return LocalAffineField(params)

    def sample_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Source coordinates (qx, qy) sampled at each output pixel."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        p = self.params
        qx = p[:, :, 0] * xs + p[:, :, 1] * ys + p[:, :, 4]
        qy = p[:, :, 2] * xs + p[:, :, 3] * ys + p[:, :, 5]
        return qx, qy

    def displacement(self) -> tuple[np.ndarray, np.ndarray]:
        """Displacement (qx - x, qy - y) of the sampling map at each pixel.

        Computed from (A - I) directly rather than as q - p, which would
        cancel away the low bits of small displacements at large coordinates.
        """
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        p = self.params
        ux = (p[:, :, 0] - 1.0) * xs + p[:, :, 1] * ys + p[:, :, 4]
        uy = p[:, :, 2] * xs + (p[:, :, 3] - 1.0) * ys + p[:, :, 5]
        return ux, uy

    def smoothness_residual(self) -> float:
        """Mean squared 5-point Laplacian over the six parameter planes."""
        p = self.params
        if self.height < 3 or self.width < 3:
            return 0.0
        lap = (
            p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]
            - 4.0 * p[1:-1, 1:-1]
        )
        return float(np.mean(lap**2))


def compose_affine_into_field(outer_sampling: Affine2D, field: LocalAffineField) -> LocalAffineField:
    """Chain an affine sampling map after a field's sampling map.

    If the field samples at q = A_p(p) and the affine samples at S(q), the
    composed field samples at S(A_p(p)).  ``outer_sampling`` is the affine
    *sampling* map (i.e. already the inverse of a forward transform).
    """
    p = field.params
    s = outer_sampling
    out = np.empty_like(p)
    # linear part: S.m @ [[m1 m2],[m3 m4]]
    out[:, :, 0] = s.m[0, 0] * p[:, :, 0] + s.m[0, 1] * p[:, :, 2]
    out[:, :, 1] = s.m[0, 0] * p[:, :, 1] + s.m[0, 1] * p[:, :, 3]
    out[:, :, 2] = s.m[1, 0] * p[:, :, 0] + s.m[1, 1] * p[:, :, 2]
    out[:, :, 3] = s.m[1, 0] * p[:, :, 1] + s.m[1, 1] * p[:, :, 3]
    out[:, :, 4] = s.m[0, 0] * p[:, :, 4] + s.m[0, 1] * p[:, :, 5] + s.t[0]
    out[:, :, 5] = s.m[1, 0] * p[:, :, 4] + s.m[1, 1] * p[:, :, 5] + s.t[1]
    return LocalAffineField(out)


def format_affine(t: Affine2D) -> str:
    return " ".join(format(v, ".17g") for v in t.params)


def parse_affine(line: str) -> Affine2D:
    values = [float(v) for v in line.split()]
    return Affine2D.from_params(values)


def write_affine_chain(path, entries) -> None:
    """Write affine transforms as text: per entry a slice-pair header line
    ``pair <src> <dst>`` followed by the 6-number parameter line."""
    path = Path(path)
    lines = []
    for (src, dst), transform in entries:
        lines.append(f"pair {src} {dst}")
        lines.append(format_affine(transform))
    path.write_text("\n".join(lines) + "\n")


def read_affine_chain(path) -> list[tuple[tuple[int, int], Affine2D]]:
    entries = []
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) % 2 != 0:
        raise ValueError(f"malformed affine chain file: {path}")
    for header, params in zip(lines[0::2], lines[1::2]):
        parts = header.split()
        if len(parts) != 3 or parts[0] != "pair":
            raise ValueError(f"bad slice-pair header: {header!r}")
        entries.append(((int(parts[1]), int(parts[2])), parse_affine(params)))
    return entries


def write_field(path, field: LocalAffineField) -> None:
    """Binary field format: magic, uint32 width/height, then the six
    parameter planes as row-major little-endian float64."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<II", field.width, field.height))
        for plane in range(6):
            fh.write(
                np.ascontiguousarray(field.params[:, :, plane], dtype="<f8").tobytes()
            )


def read_field(path) -> LocalAffineField:
    data = Path(path).read_bytes()
    if not data.startswith(_FIELD_MAGIC):
        raise ValueError(f"not a local affine field file: {path}")
    off = len(_FIELD_MAGIC)
    width, height = struct.unpack_from("<II", data, off)
    off += 8
    plane_bytes = width * height * 8
    if len(data) != off + 6 * plane_bytes:
        raise ValueError(f"truncated field file: {path}")
    params = np.empty((height, width, 6))
    for plane in range(6):
        params[:, :, plane] = np.frombuffer(
            data, dtype="<f8", count=width * height, offset=off
        ).reshape(height, width)
        off += plane_bytes
    return LocalAffineField(params)
