"""Deterministic synthetic fingers, multi-pose observations and contact prints.

A finger is an ellipsoid with semi-axes ``(a_x, a_y, a_z)`` (width, length,
depth) centred at the origin; the camera looks down the z axis and sees the
``z > 0`` half.  Observations use image-pixel coordinates measured from the
image centre, so the rendered grids have their origin at ``-size / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry3d import (
    DepthGrid,
    GeometryError,
    GradientGrid,
    Minutia2D,
    Template3D,
    integrate_depth,
    lift_minutiae,
    wrap_angle,
)

DEFAULT_SEMI_AXES = (300.0, 450.0, 260.0)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class FingerParams:
    n_minutiae: int = 60
    semi_axes: tuple = DEFAULT_SEMI_AXES
    axis_jitter: float = 0.05  # relative per-finger variation of the semi-axes
    max_abs_y: float = 0.7  # fraction of a_y covered by the print
    max_radial: float = 0.93  # keep minutiae away from the silhouette
    min_separation: float = 18.0  # px

    def __post_init__(self):
        if not 20 <= self.n_minutiae <= 200:
            raise SynthError("between 20 and 200 minutiae per finger")
        if min(self.semi_axes) <= 0:
            raise SynthError("semi-axes must be positive")


@dataclass
class SyntheticFinger:
    finger_id: str
    semi_axes: tuple
    points: np.ndarray  # (N, 3) canonical positions on the surface
    directions: np.ndarray  # (N, 3) unit tangent directions
    seed: int

    def normals(self, points=None) -> np.ndarray:
        p = self.points if points is None else points
        a = np.asarray(self.semi_axes)
        n = p / (a * a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass(frozen=True)
class ObservationSpec:
    yaw: float = 0.0  # degrees, rotation about the vertical (y) axis
    dropout: float = 0.0
    position_sigma: float = 0.0  # px
    orientation_sigma: float = 0.0  # radians
    seed: int = 0
    min_normal_z: float = 0.0  # minutiae with n_z <= this are hidden
    image_size: int = 1024
    grid_scale: int = 8
    mask_min_normal_z: float = 0.2
    alpha: float = 25.0

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 0.5:
            raise SynthError("dropout must lie in [0, 0.5]")
        if self.position_sigma < 0 or self.orientation_sigma < 0:
            raise SynthError("noise levels must be non-negative")
        if abs(self.yaw) > 60:
            raise SynthError("|yaw| must not exceed 60 degrees")


@dataclass
class Observation:
    template: Template3D  # ground-truth 3D minutiae in the camera frame
    minutiae2d: list  # list[Minutia2D] matching template rows
    gradient: GradientGrid
    depth: DepthGrid  # true front-surface depth on the grid
    visible_before_dropout: int = 0


def _tangent_basis(n):
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    u = np.cross(n, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    return u, v


def generate_finger(seed: int, params: FingerParams = FingerParams(), finger_id: str | None = None) -> SyntheticFinger:
    """Sample minutiae on the camera-facing half of a per-finger ellipsoid."""
    rng = np.random.default_rng([seed, 0x6A11])
    a = np.asarray(params.semi_axes, dtype=np.float64) * (1.0 + rng.uniform(-1, 1, 3) * params.axis_jitter)
    pts = []
    tries = 0
    while len(pts) < params.n_minutiae:
        tries += 1
        if tries > 200 * params.n_minutiae:
            raise SynthError("cannot place the requested minutiae with this separation")
        y = rng.uniform(-params.max_abs_y, params.max_abs_y) * a[1]
        x = rng.uniform(-1.0, 1.0) * a[0]
        q = (x / a[0]) ** 2 + (y / a[1]) ** 2
        if q > params.max_radial**2:
            continue
        z = a[2] * math.sqrt(1.0 - q)
        cand = np.array([x, y, z])
        if pts and np.min(np.linalg.norm(np.asarray(pts) - cand, axis=1)) < params.min_separation:
            continue
        pts.append(cand)
    points = np.asarray(pts)
    n = points / (a * a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    u, v = _tangent_basis(n)
    beta = rng.uniform(0.0, 2 * math.pi, len(points))
    d = np.cos(beta)[:, None] * u + np.sin(beta)[:, None] * v
    # remove any residual normal component from rounding
    d -= (d * n).sum(axis=1, keepdims=True) * n
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return SyntheticFinger(finger_id or f"f{seed}", tuple(float(t) for t in a), points, d, seed)


def yaw_matrix(yaw_deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def render_grids(finger: SyntheticFinger, yaw: float, spec: ObservationSpec) -> tuple[GradientGrid, DepthGrid]:
    """Front-surface depth and gradients of the yawed ellipsoid at ``1 / grid_scale`` resolution."""
    r = yaw_matrix(yaw)
    a = np.asarray(finger.semi_axes)
    cells = spec.image_size // spec.grid_scale
    origin = -spec.image_size / 2.0
    coords = origin + spec.grid_scale * np.arange(cells)
    xx, yy = np.meshgrid(coords, coords)  # [j, i]
    # a point q in camera frame lies on the surface when |diag(1/a) R^T q| = 1
    inv = r.T / a[:, None]  # rows map q -> scaled canonical coordinates
    base = inv[:, 0][:, None, None] * xx + inv[:, 1][:, None, None] * yy
    dirz = inv[:, 2]
    qa = float(dirz @ dirz)
    qb = 2.0 * np.einsum("k,kij->ij", dirz, base)
    qc = np.einsum("kij,kij->ij", base, base) - 1.0
    disc = qb * qb - 4 * qa * qc
    hit = disc > 0
    z = np.where(hit, (-qb + np.sqrt(np.where(hit, disc, 0.0))) / (2 * qa), 0.0)
    q = np.stack([xx, yy, z], axis=-1)
    canon = q @ r  # R^T q for row vectors
    n = (canon / (a * a)) @ r.T
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    nz = n[..., 2]
    mask = hit & (nz >= spec.mask_min_normal_z)
    safe_nz = np.where(mask, nz, 1.0)
    gx = np.where(mask, -n[..., 0] / safe_nz, 0.0)
    gy = np.where(mask, -n[..., 1] / safe_nz, 0.0)
    grid = GradientGrid(gx, gy, mask, scale=float(spec.grid_scale), origin=(origin, origin))
    depth = DepthGrid(np.where(mask, z, 0.0), mask.copy(), scale=float(spec.grid_scale), origin=(origin, origin))
    return grid, depth


def observe(
    finger: SyntheticFinger,
    spec: ObservationSpec,
    template_id: str | None = None,
    pose_label: str | None = None,
    render: bool = True,
) -> Observation:
    """Rotate the finger by ``spec.yaw``, hide back-facing minutiae, add noise."""
    rng = np.random.default_rng([spec.seed, 0x0B5E])
    r = yaw_matrix(spec.yaw)
    p = finger.points @ r.T
    d = finger.directions @ r.T
    n = finger.normals() @ r.T
    visible = n[:, 2] > spec.min_normal_z
    idx = np.flatnonzero(visible)
    n_visible = idx.size
    if spec.dropout > 0:
        keep = rng.random(idx.size) >= spec.dropout
        idx = idx[keep]
    if idx.size < 4:
        raise SynthError(f"only {idx.size} minutiae visible at yaw {spec.yaw}")
    p, d, n = p[idx], d[idx], n[idx]
    if spec.position_sigma > 0:
        p = p + np.column_stack([rng.normal(0, spec.position_sigma, (idx.size, 2)), np.zeros(idx.size)])
    if spec.orientation_sigma > 0:
        # turn about the local normal so the direction stays tangent
        ang = rng.normal(0, spec.orientation_sigma, idx.size)
        cross = np.cross(n, d)
        d = np.cos(ang)[:, None] * d + np.sin(ang)[:, None] * cross
    o = spec.alpha * d
    tid = template_id or f"{finger.finger_id}_y{spec.yaw:g}_s{spec.seed}"
    tpl = Template3D(
        template_id=tid,
        finger_id=finger.finger_id,
        pose_label=pose_label or pose_label_for(spec.yaw),
        minutiae=np.hstack([p, o]),
        yaw=float(spec.yaw),
    )
    ms = [Minutia2D(float(pi[0]), float(pi[1]), math.atan2(di[1], di[0])) for pi, di in zip(p, d)]
    if render:
        grid, depth = render_grids(finger, spec.yaw, spec)
    else:
        grid = depth = None
    return Observation(tpl, ms, grid, depth, n_visible)


def pose_label_for(yaw: float) -> str:
    if abs(yaw) < 1e-9:
        return "front"
    return f"yaw{yaw:+g}"


# ---------------------------------------------------------------------------
# Contact-style prints


@dataclass(frozen=True)
class ContactParams:
    n_minutiae: tuple = (40, 70)
    region: tuple = (220.0, 300.0)  # semi-axes of the print area, px
    min_separation: float = 18.0
    max_rotation: float = math.radians(20.0)
    max_translation: float = 40.0
    drop_fraction: float = 0.15
    position_sigma: float = 2.0
    orientation_sigma: float = 0.05


@dataclass
class ContactImpression:
    identity: str
    impression: int
    minutiae: list  # list[Minutia2D]
    source_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _contact_base(rng, params: ContactParams):
    n = int(rng.integers(params.n_minutiae[0], params.n_minutiae[1] + 1))
    pts = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > 500 * n:
            raise SynthError("cannot place contact minutiae")
        x, y = rng.uniform(-1, 1, 2) * params.region
        if (x / params.region[0]) ** 2 + (y / params.region[1]) ** 2 > 1:
            continue
        if pts and np.min(np.hypot(*(np.asarray(pts) - (x, y)).T)) < params.min_separation:
            continue
        pts.append((x, y))
    return np.asarray(pts), rng.uniform(0, 2 * math.pi, n)


def generate_contact_set(
    seed: int, n_identities: int = 100, impressions: int = 2, params: ContactParams = ContactParams()
) -> list[ContactImpression]:
    """Flat 2D prints; impressions of one identity differ by a rigid motion, jitter and dropout.

    Each impression drops at most ``drop_fraction`` of the identity's minutiae,
    so any two impressions share at least ``1 - 2 * drop_fraction`` of them.
    """
    out = []
    for ident in range(n_identities):
        rng = np.random.default_rng([seed, ident, 0xC0])
        base, theta = _contact_base(rng, params)
        n = len(base)
        for imp in range(impressions):
            n_drop = int(math.floor(params.drop_fraction * n))
            keep = np.sort(rng.permutation(n)[: n - n_drop])
            rot = rng.uniform(-params.max_rotation, params.max_rotation)
            shift = rng.uniform(-params.max_translation, params.max_translation, 2)
            c, s = math.cos(rot), math.sin(rot)
            pts = base[keep] @ np.array([[c, s], [-s, c]]) + shift
            pts = pts + rng.normal(0, params.position_sigma, pts.shape)
            th = wrap_angle(theta[keep] + rot + rng.normal(0, params.orientation_sigma, keep.size))
            ms = [Minutia2D(float(x), float(y), float(t)) for (x, y), t in zip(pts, th)]
            out.append(ContactImpression(f"c{seed}_{ident}", imp, ms, keep))
    return out


def centre_minutiae(ms) -> list:
    """Shift 2D minutiae so their centroid is the projection centre."""
    cx = float(np.mean([m.x for m in ms]))
    cy = float(np.mean([m.y for m in ms]))
    return [Minutia2D(m.x - cx, m.y - cy, m.theta) for m in ms]


# ---------------------------------------------------------------------------
# Multi-pose corpora


@dataclass(frozen=True)
class CorpusSpec:
    n_fingers: int = 100
    first_finger: int = 0  # finger seeds are seed-offset, so disjoint ranges give disjoint fingers
    yaws: tuple = (-30.0, 0.0, 30.0)
    impressions: int = 2
    dropout: float = 0.15
    position_sigma: float = 3.0
    orientation_sigma: float = 0.1
    min_normal_z: float = 0.25
    seed: int = 0
    finger: FingerParams = FingerParams()


@dataclass
class CorpusEntry:
    template: Template3D  # lifted from the observation's 2D minutiae and gradient grid
    rows2d: np.ndarray  # (N, 3) matching 2D minutiae (x, y, theta)


def synthesize_corpus(spec: CorpusSpec) -> list[CorpusEntry]:
    """Observe every finger at every yaw, integrate depth and lift; off-mask minutiae are dropped."""
    out = []
    for f in range(spec.first_finger, spec.first_finger + spec.n_fingers):
        finger = generate_finger(spec.seed * 1_000_003 + f, spec.finger, finger_id=f"F{f:04d}")
        for yaw in spec.yaws:
            cache = None
            for imp in range(spec.impressions):
                ospec = ObservationSpec(
                    yaw=yaw,
                    dropout=spec.dropout,
                    position_sigma=spec.position_sigma,
                    orientation_sigma=spec.orientation_sigma,
                    seed=(spec.seed * 1_000_003 + f) * 97 + imp * 11 + int(yaw + 90),
                    min_normal_z=spec.min_normal_z,
                )
                label = pose_label_for(yaw)
                tid = f"F{f:04d}_{label}_{imp}"
                obs = observe(finger, ospec, tid, label, render=cache is None)
                if cache is None:
                    cache = (obs.gradient, integrate_depth(obs.gradient))
                grid, depth = cache
                rows, kept = lift_minutiae(obs.minutiae2d, grid, depth, drop_off_mask=True)
                if len(kept) < 4:
                    raise GeometryError(f"{tid}: only {len(kept)} minutiae on the mask")
                tpl = Template3D(tid, finger.finger_id, label, rows, yaw=float(yaw))
                r2 = np.array([[m.x, m.y, m.theta] for m in (obs.minutiae2d[k] for k in kept)])
                out.append(CorpusEntry(tpl, r2))
    return out
