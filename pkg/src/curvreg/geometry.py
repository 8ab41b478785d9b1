"""Centerline geometry, differentiable volume sampling, and polar resampling.

Conventions used throughout:

* World coordinates are in mm. Volumes store values on a voxel-center grid:
  world = origin + index * spacing, array shape (nx, ny, nz), C order
  (z varies fastest in the serialized form).
* A centerline carries one orthonormal frame (u, v, t) per point with
  det[u v t] = +1; t is the local tangent.
* Polar samples live at radii r_i = (i + 1/2) * dr and angles
  theta_j = 2*pi*j / n_theta, measured from u toward v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CenterlineError

ORTHO_TOL = 1e-9


def _normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.clip(norm, eps, None)


@dataclass(frozen=True)
class PolarConfig:
    """Sampling grid of the polar (r, theta, z) representation."""

    n_r: int = 64
    dr: float = 0.07
    n_theta: int = 48
    dz: float = 0.3

    def __post_init__(self):
        if self.n_r < 2:
            raise ValueError("n_r must be >= 2")
        if self.n_theta < 4:
            raise ValueError("n_theta must be >= 4")
        if self.dr <= 0 or self.dz <= 0:
            raise ValueError("dr and dz must be > 0")

    @property
    def radii(self) -> np.ndarray:
        return (np.arange(self.n_r) + 0.5) * self.dr

    @property
    def thetas(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta


@dataclass
class Volume3:
    """3D scalar grid with physical spacing and origin (all mm)."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3D")
        if any(d < 2 for d in self.data.shape):
            raise ValueError("all volume dims must be >= 2")
        if np.any(self.spacing <= 0):
            raise ValueError("spacings must be > 0")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


@dataclass
class Centerline:
    """Ordered centerline points with per-point orthonormal frames."""

    points: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray
    arc_length: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.arc_length = np.asarray(self.arc_length, dtype=np.float64)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def length(self) -> float:
        return float(self.arc_length[-1])

    def reversed(self) -> "Centerline":
        """Same path traversed end-to-start (frames rebuilt, right-handed)."""
        return rotation_minimizing_frames(self.points[::-1].copy(), u0=self.u[-1])

    def validate(self) -> None:
        n = self.n_points
        if n < 2:
            raise CenterlineError("centerline needs >= 2 points")
        for name, arr in (("points", self.points), ("u", self.u), ("v", self.v), ("t", self.t)):
            if arr.shape != (n, 3):
                raise CenterlineError(f"{name} must have shape ({n}, 3)")
        if self.arc_length.shape != (n,):
            raise CenterlineError("arc_length must have one entry per point")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(seg == 0.0):
            raise CenterlineError("consecutive centerline points must be distinct")
        if np.any(np.diff(self.arc_length) <= 0):
            raise CenterlineError("arc_length must be strictly increasing")
        for a, b in (("u", "v"), ("u", "t"), ("v", "t")):
            dots = np.abs(np.sum(getattr(self, a) * getattr(self, b), axis=1))
            if np.any(dots > ORTHO_TOL):
                raise CenterlineError(f"frames not orthogonal: {a}.{b} up to {dots.max():.2e}")
        for name in ("u", "v", "t"):
            norms = np.linalg.norm(getattr(self, name), axis=1)
            if np.any(np.abs(norms - 1.0) > ORTHO_TOL):
                raise CenterlineError(f"{name} vectors not unit length")
        det = np.einsum("ij,ij->i", np.cross(self.u, self.v), self.t)
        if np.any(det < 0):
            raise CenterlineError("frames must be right-handed (det[u v t] = +1)")


@dataclass
class PolarImage:
    """(r, theta, z) intensity tensor sampled along a centerline."""

    data: np.ndarray
    config: PolarConfig
    z_positions: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.z_positions = np.asarray(self.z_positions, dtype=np.float64)

    @property
    def n_z(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if self.data.shape[:2] != (self.config.n_r, self.config.n_theta):
            raise ValueError("polar data shape inconsistent with config")
        if self.z_positions.shape != (self.data.shape[2],):
            raise ValueError("z_positions must have one entry per slice")
        if self.data.shape[2] > 1 and np.any(np.diff(self.z_positions) <= 0):
            raise ValueError("z_positions must be monotonically increasing")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("polar data contains non-finite values")


# ---------------------------------------------------------------------------
# Centerline construction
# ---------------------------------------------------------------------------

def _chord_tangents(points: np.ndarray) -> np.ndarray:
    diffs = np.diff(points, axis=0)
    tangents = np.empty_like(points)
    tangents[0] = diffs[0]
    tangents[-1] = diffs[-1]
    if points.shape[0] > 2:
        tangents[1:-1] = diffs[:-1] + diffs[1:]
    return _normalize(tangents)


def _pick_reference_axis(t0: np.ndarray) -> np.ndarray:
    # world axis least aligned with the first tangent; fixes the u0 gauge
    return np.eye(3)[int(np.argmin(np.abs(t0)))]


def rotation_minimizing_frames(points: np.ndarray, u0: np.ndarray | None = None) -> Centerline:
    """Build a centerline with rotation-minimizing frames (double reflection).

    Parameters
    ----------
    points : np.ndarray
        Ordered positions, shape (N, 3), N >= 2, consecutive points distinct.
    u0 : np.ndarray, optional
        Preferred first in-plane axis; projected onto the plane orthogonal to
        the first tangent. Defaults to the world axis least aligned with it.

    Returns
    -------
    Centerline
        Frames are orthonormal and right-handed; twist about the tangent is
        limited to what the curve itself induces.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 2:
        raise CenterlineError("points must have shape (N, 3) with N >= 2")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if np.any(seg == 0.0):
        raise CenterlineError("repeated consecutive points")

    tangents = _chord_tangents(points)
    n = points.shape[0]
    u = np.empty((n, 3))

    ref = _pick_reference_axis(tangents[0]) if u0 is None else np.asarray(u0, dtype=np.float64)
    proj = ref - np.dot(ref, tangents[0]) * tangents[0]
    if np.linalg.norm(proj) < 1e-10:
        ref = _pick_reference_axis(tangents[0])
        proj = ref - np.dot(ref, tangents[0]) * tangents[0]
    u[0] = proj / np.linalg.norm(proj)

    # double-reflection transport of u along the polyline
    for i in range(n - 1):
        d1 = points[i + 1] - points[i]
        c1 = np.dot(d1, d1)
        u_l = u[i] - (2.0 / c1) * np.dot(d1, u[i]) * d1
        t_l = tangents[i] - (2.0 / c1) * np.dot(d1, tangents[i]) * d1
        d2 = tangents[i + 1] - t_l
        c2 = np.dot(d2, d2)
        if c2 < 1e-30:
            u[i + 1] = u_l
        else:
            u[i + 1] = u_l - (2.0 / c2) * np.dot(d2, u_l) * d2
        # guard against drift: keep u orthogonal to t and unit
        u[i + 1] -= np.dot(u[i + 1], tangents[i + 1]) * tangents[i + 1]
        u[i + 1] /= np.linalg.norm(u[i + 1])

    v = np.cross(tangents, u)
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    c = Centerline(points=points, u=u, v=v, t=tangents, arc_length=arc)
    c.validate()
    return c


def resample_centerline(c: Centerline, spacing: float) -> Centerline:
    """Resample a centerline to equal arc-length spacing.

    The returned points lie on the piecewise-linear path of ``c``. Arc
    positions are 0, spacing, 2*spacing, ... plus the original endpoint when
    the total length is not an exact multiple. Frames are rebuilt with
    rotation-minimizing transport seeded from the first input frame, and the
    stored arc_length equals the resampling grid.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    c.validate()
    total = c.length
    if total < spacing:
        raise CenterlineError(f"centerline length {total:.3g} mm shorter than spacing")

    n_steps = int(np.floor(total / spacing + 1e-9))
    s_new = np.arange(n_steps + 1) * spacing
    if total - s_new[-1] > 1e-9:
        s_new = np.append(s_new, total)

    pts = np.empty((s_new.size, 3))
    for dim in range(3):
        pts[:, dim] = np.interp(s_new, c.arc_length, c.points[:, dim])

    out = rotation_minimizing_frames(pts, u0=c.u[0])
    out.arc_length = s_new
    return out


# ---------------------------------------------------------------------------
# Volume sampling
# ---------------------------------------------------------------------------

def trilinear_sample(vol: Volume3, pts: np.ndarray, with_gradient: bool = True):
    """Trilinear interpolation with its analytic spatial gradient.

    Parameters
    ----------
    vol : Volume3
        Source volume; values interpolated between voxel centers.
    pts : np.ndarray
        World positions in mm, shape (..., 3).
    with_gradient : bool
        Also return d(value)/d(position) in 1/mm, shape (..., 3).

    Returns
    -------
    values : np.ndarray
        Interpolated values; 0 outside the voxel-center hull.
    gradients : np.ndarray, optional
        Analytic gradient of the interpolant; 0 outside. At cell boundaries
        the derivative of the containing (lower) cell is reported.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError("pts must have shape (..., 3)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample positions must be finite")

    q = (pts - vol.origin) / vol.spacing
    dims = np.asarray(vol.data.shape)
    valid = np.all((q >= 0.0) & (q <= dims - 1), axis=-1)

    cell = np.clip(np.floor(q).astype(np.int64), 0, dims - 2)
    frac = q - cell
    x, y, z = cell[..., 0], cell[..., 1], cell[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]

    d = vol.data
    c000 = d[x, y, z]
    c100 = d[x + 1, y, z]
    c010 = d[x, y + 1, z]
    c001 = d[x, y, z + 1]
    c110 = d[x + 1, y + 1, z]
    c101 = d[x + 1, y, z + 1]
    c011 = d[x, y + 1, z + 1]
    c111 = d[x + 1, y + 1, z + 1]

    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz

    c00 = c000 * gx + c100 * fx
    c01 = c001 * gx + c101 * fx
    c10 = c010 * gx + c110 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    values = np.where(valid, c0 * gz + c1 * fz, 0.0)

    if not with_gradient:
        return values

    # d/dx in index units, then scaled to per-mm
    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz \
        + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    dy = ((c010 - c000) * gx + (c110 - c100) * fx) * gz \
        + ((c011 - c001) * gx + (c111 - c101) * fx) * fz
    dz = ((c001 - c000) * gx + (c101 - c100) * fx) * gy \
        + ((c011 - c010) * gx + (c111 - c110) * fx) * fy

    grads = np.stack([dx, dy, dz], axis=-1) / vol.spacing
    grads = np.where(valid[..., None], grads, 0.0)
    return values, grads


# ---------------------------------------------------------------------------
# Frame interpolation along the arc (with analytic derivatives)
# ---------------------------------------------------------------------------

@dataclass
class FrameSet:
    """Frames evaluated at arbitrary arc positions, plus arc derivatives."""

    pos: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray
    dpos: np.ndarray | None = None
    du: np.ndarray | None = None
    dv: np.ndarray | None = None
    dt: np.ndarray | None = None


def interpolate_frames(c: Centerline, s: np.ndarray, with_derivatives: bool = False) -> FrameSet:
    """Evaluate centerline position and frames at arc positions ``s``.

    Positions and raw frame vectors are interpolated linearly between nodes;
    frames are re-orthonormalized (tangent first, then u, then v = t x u).
    When requested, analytic d/ds of every output is propagated through the
    same chain. ``s`` must lie within [0, length]; callers clamp beforehand.
    """
    s = np.asarray(s, dtype=np.float64)
    arc = c.arc_length
    idx = np.clip(np.searchsorted(arc, s, side="right") - 1, 0, c.n_points - 2)
    seg = arc[idx + 1] - arc[idx]
    w = (s - arc[idx]) / seg
    w3 = w[..., None]

    def lerp(a):
        return (1.0 - w3) * a[idx] + w3 * a[idx + 1]

    pos = lerp(c.points)
    u_raw = lerp(c.u)
    t_raw = lerp(c.t)

    # Gram-Schmidt: tangent, then u against t, then v = t x u
    t_norm = np.linalg.norm(t_raw, axis=-1, keepdims=True)
    t = t_raw / t_norm
    a = u_raw - np.sum(u_raw * t, axis=-1, keepdims=True) * t
    a_norm = np.linalg.norm(a, axis=-1, keepdims=True)
    u = a / a_norm
    # right-handedness makes v redundant: v = t x u reproduces the stored v
    v = np.cross(t, u)

    if not with_derivatives:
        return FrameSet(pos=pos, u=u, v=v, t=t)

    inv = 1.0 / seg[..., None]

    def dlerp(a):
        return (a[idx + 1] - a[idx]) * inv

    dpos = dlerp(c.points)
    du_raw = dlerp(c.u)
    dt_raw = dlerp(c.t)

    dt = (dt_raw - np.sum(dt_raw * t, axis=-1, keepdims=True) * t) / t_norm
    ut = np.sum(u_raw * t, axis=-1, keepdims=True)
    da = du_raw \
        - np.sum(du_raw * t, axis=-1, keepdims=True) * t \
        - np.sum(u_raw * dt, axis=-1, keepdims=True) * t \
        - ut * dt
    du = (da - np.sum(da * u, axis=-1, keepdims=True) * u) / a_norm
    dv = np.cross(dt, u) + np.cross(t, du)
    return FrameSet(pos=pos, u=u, v=v, t=t, dpos=dpos, du=du, dv=dv, dt=dt)


# ---------------------------------------------------------------------------
# Polar resampling
# ---------------------------------------------------------------------------

def sample_polar_at_frames(vol: Volume3, frames: FrameSet, cfg: PolarConfig,
                           with_gradient: bool = False):
    """Sample radial profiles around the given frames.

    Returns data of shape (n_r, n_theta, F) and, optionally, the trilinear
    spatial gradients at every sample (n_r, n_theta, F, 3).
    """
    r = cfg.radii
    cos_t = np.cos(cfg.thetas)
    sin_t = np.sin(cfg.thetas)
    # dirs: (n_theta, F, 3)
    dirs = cos_t[:, None, None] * frames.u[None, :, :] + sin_t[:, None, None] * frames.v[None, :, :]
    pts = frames.pos[None, None, :, :] + r[:, None, None, None] * dirs[None, :, :, :]
    if with_gradient:
        vals, grads = trilinear_sample(vol, pts, with_gradient=True)
        return vals, grads
    return trilinear_sample(vol, pts, with_gradient=False)


def polar_transform(vol: Volume3, c: Centerline, cfg: PolarConfig) -> PolarImage:
    """Resample a volume into a cylindrical (r, theta, z) image along ``c``.

    ``c`` is expected to be resampled to cfg.dz spacing. Sample (i_r, i_th, p)
    is the trilinear value at points[p] + r_i * (cos th_j * u_p + sin th_j * v_p).
    """
    c.validate()
    frames = interpolate_frames(c, c.arc_length)
    data = sample_polar_at_frames(vol, frames, cfg)
    img = PolarImage(data=data, config=cfg, z_positions=c.arc_length.copy())
    img.validate()
    return img
