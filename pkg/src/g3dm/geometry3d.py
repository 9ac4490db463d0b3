"""Closed-form 3D geometry for minutiae.

Orientation lifting from a 2D direction and a surface gradient, depth
integration of gradient fields, spherical lifting of contact-style prints and
the rigid pose transforms used by the spatial transformer.

Conventions
-----------
Grids are stored as ``(height, width)`` arrays indexed ``[j, i]`` where ``i``
runs along x and ``j`` along y.  Cell ``(i, j)`` sits at pixel
``(origin_x + i * scale, origin_y + j * scale)``.  Gradients are always in
depth-pixels per image-pixel, independent of the grid scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import spsolve

TWO_PI = 2.0 * math.pi
DEFAULT_ALPHA = 25.0
DEFAULT_SPHERE_C = 70000.0


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (off-mask samples, bad masks)."""


# ---------------------------------------------------------------------------
# Data types


@dataclass(frozen=True)
class Minutia2D:
    x: float
    y: float
    theta: float  # radians, normalised to [0, 2*pi)

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise GeometryError(f"non-finite minutia {self.x}, {self.y}, {self.theta}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class SphericalOrientation:
    theta: float  # azimuth
    phi: float  # polar angle in [0, pi]

    def unit(self) -> np.ndarray:
        s = math.sin(self.phi)
        return np.array([s * math.cos(self.theta), s * math.sin(self.theta), math.cos(self.phi)])


@dataclass(frozen=True)
class Minutia3D:
    p: np.ndarray  # (x, y, z)
    o: np.ndarray  # scaled orientation (d_x, d_y, d_z)

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.p, self.o])


@dataclass
class GradientGrid:
    g_x: np.ndarray
    g_y: np.ndarray
    mask: np.ndarray
    scale: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.g_x = np.asarray(self.g_x, dtype=np.float64)
        self.g_y = np.asarray(self.g_y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.g_x.shape == self.g_y.shape == self.mask.shape) or self.mask.ndim != 2:
            raise GeometryError("g_x, g_y and mask must share one 2D shape")
        if not self.mask.any():
            raise GeometryError("gradient grid mask is empty")
        if not (np.isfinite(self.g_x[self.mask]).all() and np.isfinite(self.g_y[self.mask]).all()):
            raise GeometryError("non-finite gradient on a masked cell")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


@dataclass
class DepthGrid:
    z: np.ndarray
    mask: np.ndarray
    scale: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.z.shape != self.mask.shape or self.mask.ndim != 2:
            raise GeometryError("z and mask must share one 2D shape")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class Pose:
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (theta_t, psi_t, phi_t)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Pose":
        v = [float(a) for a in v]
        return cls(t=tuple(v[:3]), euler=tuple(v[3:6]))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.t, *self.euler], dtype=np.float64)


@dataclass
class Template3D:
    """One capture: an id-tagged set of 3D minutiae.

    ``minutiae`` is an ``(N, 6)`` array of rows ``(x, y, z, d_x, d_y, d_z)``.
    """

    template_id: str
    finger_id: str
    pose_label: str
    minutiae: np.ndarray
    yaw: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.minutiae, dtype=np.float64)
        if m.size == 0:
            m = m.reshape(0, 6)
        if m.ndim != 2 or m.shape[1] != 6:
            raise GeometryError(f"template {self.template_id}: minutiae must be (N, 6), got {m.shape}")
        self.minutiae = m

    def __len__(self) -> int:
        return self.minutiae.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.minutiae[:, :3]

    @property
    def orientations(self) -> np.ndarray:
        return self.minutiae[:, 3:]

    def iter_minutiae(self) -> Iterable[Minutia3D]:
        for row in self.minutiae:
            yield Minutia3D(p=row[:3].copy(), o=row[3:].copy())

    @classmethod
    def from_minutiae(cls, template_id, finger_id, pose_label, minutiae: Sequence[Minutia3D], **kw):
        rows = np.array([m.as_row() for m in minutiae], dtype=np.float64).reshape(-1, 6)
        return cls(template_id, finger_id, pose_label, rows, **kw)


def wrap_angle(theta):
    """Map angles to [0, 2*pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    if np.ndim(out) == 0:
        return 0.0 if out >= TWO_PI else float(out)
    out[out >= TWO_PI] = 0.0
    return out


# ---------------------------------------------------------------------------
# Orientation lifting


def solve_3d_orientation(theta2d: float, g: Sequence[float]) -> SphericalOrientation:
    """Polar angle of the tangent direction whose xy-projection points along ``theta2d``.

    Solves ``sin(phi) * (g_x cos(theta) + g_y sin(theta)) + cos(phi) = 0`` on the
    branch ``sin(phi) >= 0``.
    """
    if not math.isfinite(theta2d) or not all(math.isfinite(v) for v in g):
        raise GeometryError("non-finite orientation input")
    slope = g[0] * math.cos(theta2d) + g[1] * math.sin(theta2d)
    # (sin phi, cos phi) is parallel to (1, -slope)
    phi = math.atan2(1.0, -slope)
    return SphericalOrientation(theta=wrap_angle(theta2d), phi=phi)


def solve_3d_orientation_batch(theta2d: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Vectorised :func:`solve_3d_orientation`; returns unit directions ``(N, 3)``."""
    theta2d = np.asarray(theta2d, dtype=np.float64)
    c, s = np.cos(theta2d), np.sin(theta2d)
    slope = gx * c + gy * s
    norm = np.sqrt(1.0 + slope * slope)
    sin_phi = 1.0 / norm
    cos_phi = -slope / norm
    return np.stack([sin_phi * c, sin_phi * s, cos_phi], axis=-1)


def scale_orientation(s: SphericalOrientation, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if not alpha > 0:
        raise GeometryError(f"orientation scale must be positive, got {alpha}")
    return alpha * s.unit()


# ---------------------------------------------------------------------------
# Grid sampling and depth integration


def _cell_coords(grid, x: float, y: float) -> tuple[float, float]:
    return (x - grid.origin[0]) / grid.scale, (y - grid.origin[1]) / grid.scale


def sample_bilinear(grid, values: np.ndarray, x: float, y: float) -> float:
    """Bilinear sample of ``values`` at pixel ``(x, y)`` using only masked corners.

    The nearest cell must be masked; masked corners are re-weighted when some of
    the four bracketing cells fall outside the mask.
    """
    u, v = _cell_coords(grid, x, y)
    h, w = grid.mask.shape
    ni, nj = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
    if not (0 <= ni < w and 0 <= nj < h) or not grid.mask[nj, ni]:
        raise GeometryError(f"minutia at ({x:.2f}, {y:.2f}) falls off the mask (cell {ni}, {nj})")
    i0, j0 = int(math.floor(u)), int(math.floor(v))
    fu, fv = u - i0, v - j0
    total = 0.0
    acc = 0.0
    for di, wu in ((0, 1.0 - fu), (1, fu)):
        for dj, wv in ((0, 1.0 - fv), (1, fv)):
            i, j = i0 + di, j0 + dj
            wgt = wu * wv
            if wgt > 0.0 and 0 <= i < w and 0 <= j < h and grid.mask[j, i]:
                acc += wgt * values[j, i]
                total += wgt
    if total == 0.0:
        return float(values[nj, ni])
    return acc / total


def _single_component(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return n == 1


def integrate_depth(grid: GradientGrid) -> DepthGrid:
    """Least-squares depth from a gradient field on a 4-connected mask.

    Each pair of 4-adjacent masked cells contributes one equation
    ``z_b - z_a = scale * (g_a + g_b) / 2``; the normal equations (a graph
    Laplacian) are solved with one cell pinned and the result shifted to zero
    mean over the mask.  Exact for affine depth fields.
    """
    mask = grid.mask
    if not mask.any():
        raise GeometryError("empty mask")
    if not _single_component(mask):
        raise GeometryError("mask must be a single 4-connected component")
    h, w = mask.shape
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    n = int(mask.sum())

    rows_a, rows_b, rhs = [], [], []
    horiz = mask[:, :-1] & mask[:, 1:]
    ja, ia = np.nonzero(horiz)
    rows_a.append(index[ja, ia])
    rows_b.append(index[ja, ia + 1])
    rhs.append(0.5 * grid.scale * (grid.g_x[ja, ia] + grid.g_x[ja, ia + 1]))
    vert = mask[:-1, :] & mask[1:, :]
    ja, ia = np.nonzero(vert)
    rows_a.append(index[ja, ia])
    rows_b.append(index[ja + 1, ia])
    rhs.append(0.5 * grid.scale * (grid.g_y[ja, ia] + grid.g_y[ja + 1, ia]))
    a = np.concatenate(rows_a)
    b = np.concatenate(rows_b)
    d = np.concatenate(rhs)

    z = np.zeros(n)
    if n > 1:
        m = a.size
        eq = np.arange(m)
        incidence = sp.csr_matrix(
            (np.concatenate([-np.ones(m), np.ones(m)]), (np.concatenate([eq, eq]), np.concatenate([a, b]))),
            shape=(m, n),
        )
        lap = (incidence.T @ incidence).tocsc()
        div = incidence.T @ d
        # pin cell 0; the Laplacian of a connected graph is then SPD
        z[1:] = spsolve(lap[1:, 1:], div[1:])
        z -= z.mean()

    depth = np.zeros(mask.shape)
    depth[mask] = z
    return DepthGrid(z=depth, mask=mask.copy(), scale=grid.scale, origin=tuple(grid.origin))


NORMAL_MODES = ("as-printed", "surface")


def _normal_sign(normal: str) -> float:
    # (g_x, g_y, 1) as printed; the graph z(x, y) itself has normal (-g_x, -g_y, 1)
    if normal == "as-printed":
        return 1.0
    if normal == "surface":
        return -1.0
    raise ValueError(f"unknown normal convention {normal!r}")


def lift_minutia(
    m: Minutia2D,
    grid: GradientGrid,
    depth: DepthGrid,
    alpha: float = DEFAULT_ALPHA,
    normal: str = "as-printed",
) -> Minutia3D:
    """Lift one minutia: depth and gradient sampled bilinearly at ``(m.x, m.y)``.

    ``normal="surface"`` makes the orientation tangent to the integrated surface;
    the printed convention yields its mirror image in ``d_z``.
    """
    sign = _normal_sign(normal)
    z = sample_bilinear(depth, depth.z, m.x, m.y)
    gx = sample_bilinear(grid, grid.g_x, m.x, m.y)
    gy = sample_bilinear(grid, grid.g_y, m.x, m.y)
    o = scale_orientation(solve_3d_orientation(m.theta, (sign * gx, sign * gy)), alpha)
    return Minutia3D(p=np.array([m.x, m.y, z]), o=o)


def lift_minutiae(
    ms: Sequence[Minutia2D],
    grid: GradientGrid,
    depth: DepthGrid | None = None,
    alpha: float = DEFAULT_ALPHA,
    drop_off_mask: bool = False,
    normal: str = "as-printed",
) -> tuple[np.ndarray, list[int]]:
    """Lift a list of minutiae; returns ``(rows (N, 6), kept indices)``."""
    if depth is None:
        depth = integrate_depth(grid)
    rows, kept = [], []
    for idx, m in enumerate(ms):
        try:
            lm = lift_minutia(m, grid, depth, alpha, normal)
        except GeometryError:
            if drop_off_mask:
                continue
            raise
        rows.append(lm.as_row())
        kept.append(idx)
    return np.array(rows, dtype=np.float64).reshape(-1, 6), kept


# ---------------------------------------------------------------------------
# Contact prints on a sphere


def spherical_lift(
    ms: Sequence[Minutia2D],
    c: float = DEFAULT_SPHERE_C,
    alpha: float = DEFAULT_ALPHA,
    normal: str = "as-printed",
) -> list[Minutia3D]:
    """Place centred contact minutiae on the sphere ``x^2 + y^2 + z^2 = max r^2 + c``.

    Orientations come from :func:`solve_3d_orientation` with the sphere's depth
    gradient ``(-x/z, -y/z)``.
    """
    if len(ms) == 0:
        raise GeometryError("spherical_lift needs at least one minutia")
    rows = spherical_lift_array(
        np.array([m.x for m in ms]), np.array([m.y for m in ms]), np.array([m.theta for m in ms]), c, alpha, normal
    )
    return [Minutia3D(p=r[:3], o=r[3:]) for r in rows]


def spherical_lift_array(
    x, y, theta, c: float = DEFAULT_SPHERE_C, alpha: float = DEFAULT_ALPHA, normal: str = "as-printed"
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if c <= 0:
        raise GeometryError("sphere constant must be positive")
    sign = _normal_sign(normal)
    r2 = x * x + y * y
    z = np.sqrt(r2.max() + c - r2)
    o = alpha * solve_3d_orientation_batch(theta, -sign * x / z, -sign * y / z)
    return np.column_stack([x, y, z, o])


# ---------------------------------------------------------------------------
# Rigid transforms


def euler_factors(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three printed factor matrices for angle rows ``(theta_t, psi_t, phi_t)``.

    ``angles`` has shape ``(..., 3)``; each factor has shape ``(..., 3, 3)``.
    ``R_x`` turns in the xy-plane and ``R_z`` in the yz-plane, exactly as printed.
    """
    angles = np.asarray(angles, dtype=np.float64)
    th, ps, ph = angles[..., 0], angles[..., 1], angles[..., 2]
    shape = angles.shape[:-1] + (3, 3)
    rx = np.zeros(shape)
    ry = np.zeros(shape)
    rz = np.zeros(shape)
    c, s = np.cos(th), np.sin(th)
    rx[..., 0, 0], rx[..., 0, 1], rx[..., 1, 0], rx[..., 1, 1], rx[..., 2, 2] = c, -s, s, c, 1.0
    c, s = np.cos(ps), np.sin(ps)
    ry[..., 0, 0], ry[..., 0, 2], ry[..., 1, 1], ry[..., 2, 0], ry[..., 2, 2] = c, -s, 1.0, s, c
    c, s = np.cos(ph), np.sin(ph)
    rz[..., 0, 0], rz[..., 1, 1], rz[..., 1, 2], rz[..., 2, 1], rz[..., 2, 2] = 1.0, c, -s, s, c
    return rx, ry, rz


def euler_factor_derivatives(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Element-wise derivatives of each factor with respect to its own angle."""
    angles = np.asarray(angles, dtype=np.float64)
    th, ps, ph = angles[..., 0], angles[..., 1], angles[..., 2]
    shape = angles.shape[:-1] + (3, 3)
    dx = np.zeros(shape)
    dy = np.zeros(shape)
    dz = np.zeros(shape)
    c, s = np.cos(th), np.sin(th)
    dx[..., 0, 0], dx[..., 0, 1], dx[..., 1, 0], dx[..., 1, 1] = -s, -c, c, -s
    c, s = np.cos(ps), np.sin(ps)
    dy[..., 0, 0], dy[..., 0, 2], dy[..., 2, 0], dy[..., 2, 2] = -s, -c, c, -s
    c, s = np.cos(ph), np.sin(ph)
    dz[..., 1, 1], dz[..., 1, 2], dz[..., 2, 1], dz[..., 2, 2] = -s, -c, c, -s
    return dx, dy, dz


def rotation_from_euler(e: Sequence[float]) -> np.ndarray:
    rx, ry, rz = euler_factors(np.asarray(e, dtype=np.float64))
    return rz @ ry @ rx


def apply_pose(tpl: Template3D, pose: Pose, orientation_mode: str = "as-printed") -> Template3D:
    """Rigidly move a template: ``p -> R p + t``; orientations per ``orientation_mode``.

    ``"as-printed"`` also adds ``t`` to the orientation vectors, ``"rotate-only"``
    rotates them.
    """
    if orientation_mode not in ("as-printed", "rotate-only"):
        raise ValueError(f"unknown orientation mode {orientation_mode!r}")
    r = rotation_from_euler(pose.euler)
    t = np.asarray(pose.t, dtype=np.float64)
    if np.array_equal(r, np.eye(3)) and not t.any():
        return replace(tpl, minutiae=tpl.minutiae.copy())
    p = tpl.positions @ r.T + t
    o = tpl.orientations @ r.T
    if orientation_mode == "as-printed":
        o = o + t
    return replace(tpl, minutiae=np.hstack([p, o]))


def matrix_2d(theta: float, matrix_mode: str = "proper-rotation") -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    if matrix_mode == "proper-rotation":
        return np.array([[c, -s], [s, c]])
    if matrix_mode == "as-printed":
        return np.array([[-c, s], [s, c]])
    raise ValueError(f"unknown matrix mode {matrix_mode!r}")


def apply_pose_2d(
    ms: Sequence[Minutia2D], theta: float, t: Sequence[float], matrix_mode: str = "proper-rotation"
) -> list[Minutia2D]:
    if len(ms) == 0:
        raise GeometryError("apply_pose_2d needs at least one minutia")
    m = matrix_2d(theta, matrix_mode)
    out = []
    for mi in ms:
        x, y = m @ np.array([mi.x, mi.y]) + np.asarray(t, dtype=np.float64)
        out.append(Minutia2D(float(x), float(y), mi.theta + theta))
    return out
