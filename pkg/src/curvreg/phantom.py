"""Synthetic vascular phantoms with exact ground truth.

A phantom is a bright tubular lumen inside a darker wall on a low background,
optionally with side branches (which interrupt the wall, producing
bifurcation labels) and hyperintense wall calcifications. A pullback is
manufactured from the phantom by sampling the volume along a known warped
geometry and applying modality effects: a monotone intensity remap,
multiplicative speckle, and a drifting guidewire wedge (bright near edge,
dark shadow behind). Every synthesized structure comes with its (theta, z)
label bins, so recovery experiments have exact references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import OutOfExtentError
from .features import transport_labels
from .geometry import (Centerline, PolarConfig, PolarImage, Volume3,
                       resample_centerline, rotation_minimizing_frames)
from .registration import TransformParams, sample_warped

BACKGROUND = 0.10
WALL = 0.35
LUMEN = 1.00
CALC_RING_INNER = 0.92   # of the local lumen radius
CALC_RING_OUTER = 0.70   # of the wall thickness, beyond the lumen
BRANCH_LABEL_MARGIN = 1.2  # mm of excess contiguous lumen extent

_DENSE_STEP = 0.05  # mm, internal rasterization resolution along the path
_PROBE_STEP = 0.05  # mm, ray sampling for label predicates


@dataclass
class BranchSpec:
    """A side branch leaving the main vessel."""

    position_mm: float
    angle_rad: float
    elevation_rad: float = 0.6
    radius_mm: float = 0.9
    length_mm: float = 6.0


@dataclass
class CalcSpec:
    """A hyperintense plaque patch on the wall."""

    position_mm: float
    extent_mm: float
    angle_rad: float
    width_rad: float
    boost: float = 0.9


@dataclass
class PhantomSpec:
    centerline_kind: str = "spline"  # line | helix | spline
    length_mm: float = 31.0
    amplitude_mm: float = 2.0
    pitch_mm: float = 24.0
    lumen_radius_mm: float = 1.5
    lumen_taper: float = 0.15
    wall_thickness_mm: float = 0.8
    branches: list = field(default_factory=list)
    calcs: list = field(default_factory=list)
    voxel_spacing_mm: float = 0.35
    noise_sigma: float = 0.0
    seed: int = 0
    margin_mm: float = 6.0

    def validate(self) -> None:
        if self.centerline_kind not in ("line", "helix", "spline"):
            raise ValueError("centerline_kind must be line, helix or spline")
        if self.lumen_radius_mm <= 0 or not 0 <= self.lumen_taper < 1:
            raise ValueError("lumen radius profile must stay positive")
        for b in self.branches:
            if not 0 < b.position_mm < self.length_mm:
                raise ValueError("branch position outside centerline extent")
        for cs in self.calcs:
            if not 0 < cs.position_mm < self.length_mm:
                raise ValueError("calcification position outside extent")


@dataclass
class PullbackConfig:
    n_frames: int = 64
    frame_spacing: float = 0.3
    guidewire: bool = True
    guidewire_angle: float = 0.7
    guidewire_width: float = np.pi / 6
    guidewire_drift: float = 0.3
    wire_edge_mm: float = 0.6
    wire_brightness: float = 1.8
    speckle_sigma: float = 0.08
    gamma: float = 0.85
    map_scale: float = 1.35
    seed: int = 0

    def validate(self) -> None:
        if self.n_frames < 16:
            raise ValueError("n_frames must be >= 16")
        if self.frame_spacing <= 0:
            raise ValueError("frame_spacing must be > 0")
        if not 0.0 < self.guidewire_width < np.pi / 2:
            raise ValueError("guidewire_width must be in (0, pi/2)")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass
class GroundTruth:
    """Exact reference attached to a synthesized pullback."""

    params: TransformParams
    labels: np.ndarray          # (3, n_theta, n_frames), classes (G, B, C)
    classes: tuple
    reference_centerline: Centerline
    mpr_labels: np.ndarray      # (2, n_theta, n_z_mpr), classes (B, C)
    label_spacing: float


# ---------------------------------------------------------------------------
# Centerline paths
# ---------------------------------------------------------------------------

def _dense_path(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    # oversample generously; trimmed to the requested arc length below
    t = np.arange(0.0, spec.length_mm * 1.6, _DENSE_STEP)
    if spec.centerline_kind == "line":
        pts = np.stack([np.zeros_like(t), np.zeros_like(t), t], axis=1)
    elif spec.centerline_kind == "helix":
        w = 2.0 * np.pi / spec.pitch_mm
        pts = np.stack([spec.amplitude_mm * np.cos(w * t),
                        spec.amplitude_mm * np.sin(w * t), t], axis=1)
    else:
        lam = spec.pitch_mm * np.array([1.0, 1.35])
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        pts = np.stack([spec.amplitude_mm * np.sin(2 * np.pi * t / lam[0] + phase[0]),
                        spec.amplitude_mm * np.sin(2 * np.pi * t / lam[1] + phase[1]),
                        t], axis=1)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    keep = arc <= spec.length_mm + _DENSE_STEP
    return pts[keep]


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _segment_distance(pts: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    denom = float(np.dot(d, d))
    t = np.clip((pts - p0) @ d / denom, 0.0, 1.0)
    return np.linalg.norm(pts - (p0 + t[:, None] * d), axis=1)


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

def generate_phantom(spec: PhantomSpec, polar_cfg: PolarConfig | None = None):
    """Rasterize the phantom volume and derive its label grid.

    Returns (Volume3, Centerline resampled at polar dz, labels) where labels
    has shape (2, n_theta, n_z) for classes (B, C) on the centerline's own
    polar grid. Deterministic for a fixed spec (seed included).
    """
    spec.validate()
    polar_cfg = polar_cfg or PolarConfig()
    dense_pts = _dense_path(spec)
    dense = rotation_minimizing_frames(dense_pts)
    c = resample_centerline(dense, polar_cfg.dz)

    def lumen_radius(s):
        return spec.lumen_radius_mm * (1.0 - spec.lumen_taper * s / c.length)

    # volume grid enclosing the tube plus sampling margin
    lo = dense_pts.min(axis=0) - spec.margin_mm - spec.lumen_radius_mm - spec.wall_thickness_mm
    hi = dense_pts.max(axis=0) + spec.margin_mm + spec.lumen_radius_mm + spec.wall_thickness_mm
    sp = spec.voxel_spacing_mm
    dims = np.maximum(np.ceil((hi - lo) / sp).astype(int) + 1, 2)
    grid = np.stack(np.meshgrid(
        lo[0] + np.arange(dims[0]) * sp,
        lo[1] + np.arange(dims[1]) * sp,
        lo[2] + np.arange(dims[2]) * sp, indexing="ij"), axis=-1)
    vox = grid.reshape(-1, 3)

    tree = cKDTree(dense.points)
    dist, idx = tree.query(vox, workers=-1)
    s_vox = dense.arc_length[idx]
    rel = vox - dense.points[idx]
    theta_vox = np.arctan2(np.einsum("ij,ij->i", rel, dense.v[idx]),
                           np.einsum("ij,ij->i", rel, dense.u[idx]))

    lum_r = lumen_radius(s_vox)
    data = np.full(vox.shape[0], BACKGROUND)
    data[dist <= lum_r + spec.wall_thickness_mm] = WALL
    data[dist <= lum_r] = LUMEN

    frames_at = lambda s: int(np.clip(round(s / _DENSE_STEP), 0, dense.n_points - 1))

    def branch_axis(b: BranchSpec):
        i = frames_at(b.position_mm)
        radial = np.cos(b.angle_rad) * dense.u[i] + np.sin(b.angle_rad) * dense.v[i]
        direction = np.cos(b.elevation_rad) * radial + np.sin(b.elevation_rad) * dense.t[i]
        direction /= np.linalg.norm(direction)
        p0 = dense.points[i]
        return p0, p0 + b.length_mm * direction

    for b in spec.branches:
        p0, p1 = branch_axis(b)
        near = _segment_distance(vox, p0, p1) <= b.radius_mm
        data[near] = LUMEN

    for cs in spec.calcs:
        ring = (dist >= CALC_RING_INNER * lum_r) & \
            (dist <= lum_r + CALC_RING_OUTER * spec.wall_thickness_mm)
        ang = np.abs(_wrap_angle(theta_vox - cs.angle_rad)) <= cs.width_rad / 2.0
        lon = np.abs(s_vox - cs.position_mm) <= cs.extent_mm / 2.0
        data[ring & ang & lon] += cs.boost

    if spec.noise_sigma > 0.0:
        rng = np.random.default_rng(spec.seed + 1)
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)

    vol = Volume3(data=data.reshape(dims), spacing=(sp, sp, sp), origin=lo)
    vol.validate()

    labels = _mpr_labels(spec, dense, c, polar_cfg, lumen_radius, branch_axis)
    return vol, c, labels


def _mpr_labels(spec, dense, c, polar_cfg, lumen_radius, branch_axis):
    """(2, n_theta, n_z) labels for (B, C) on the MPR polar grid.

    Bifurcation bins are found with the same geometry the rasterizer draws:
    cast the radial ray of each bin and measure the contiguous bright extent
    (main lumen, branch tubes, calcified ring); bins whose extent exceeds the
    local lumen radius by BRANCH_LABEL_MARGIN are bifurcations.
    Calcification bins come directly from the configured windows.
    """
    n_theta = polar_cfg.n_theta
    thetas = polar_cfg.thetas
    n_z = c.n_points
    labels = np.zeros((2, n_theta, n_z), dtype=bool)
    lum_r_z = lumen_radius(c.arc_length)

    if spec.branches:
        r_max = polar_cfg.n_r * polar_cfg.dr
        probe_r = np.arange(2 * _PROBE_STEP, r_max, _PROBE_STEP)
        dirs = (np.cos(thetas)[:, None, None] * c.u[None, :, :]
                + np.sin(thetas)[:, None, None] * c.v[None, :, :])
        pts = (c.points[None, :, None, :]
               + probe_r[None, None, :, None] * dirs[:, :, None, :])
        flat = pts.reshape(-1, 3)

        tree = cKDTree(dense.points)
        dist, idx = tree.query(flat, workers=-1)
        rel = flat - dense.points[idx]
        s_pt = dense.arc_length[idx]
        th_pt = np.arctan2(np.einsum("ij,ij->i", rel, dense.v[idx]),
                           np.einsum("ij,ij->i", rel, dense.u[idx]))

        bright = dist <= lumen_radius(s_pt)
        for b in spec.branches:
            p0, p1 = branch_axis(b)
            bright |= _segment_distance(flat, p0, p1) <= b.radius_mm
        for cs in spec.calcs:
            ring = (dist >= CALC_RING_INNER * lumen_radius(s_pt)) & \
                (dist <= lumen_radius(s_pt) + CALC_RING_OUTER * spec.wall_thickness_mm)
            ang = np.abs(_wrap_angle(th_pt - cs.angle_rad)) <= cs.width_rad / 2.0
            lon = np.abs(s_pt - cs.position_mm) <= cs.extent_mm / 2.0
            bright |= ring & ang & lon

        bright = bright.reshape(n_theta, n_z, probe_r.size)
        run = 2 * _PROBE_STEP + _PROBE_STEP * np.cumprod(bright, axis=-1).sum(axis=-1)
        labels[0] = (run - lum_r_z[None, :]) >= BRANCH_LABEL_MARGIN

    for cs in spec.calcs:
        ang = np.abs(_wrap_angle(thetas - cs.angle_rad)) <= cs.width_rad / 2.0
        lon = np.abs(c.arc_length - cs.position_mm) <= cs.extent_mm / 2.0
        labels[1] |= ang[:, None] & lon[None, :]

    covered = labels[0] | labels[1]
    full = np.all(covered, axis=0)
    if np.any(full):
        raise ValueError("branch/calcification extents cover a full slice "
                         f"at z bins {np.nonzero(full)[0][:5].tolist()}")
    return labels.astype(np.float64)


# ---------------------------------------------------------------------------
# Pullback synthesis
# ---------------------------------------------------------------------------

def _intensity_remap(x: np.ndarray, gamma: float, scale: float) -> np.ndarray:
    return scale * np.power(np.clip(x, 0.0, None) / scale, gamma)


def _wedge_columns(pcfg: PullbackConfig, n_theta: int, p: int) -> np.ndarray:
    center = pcfg.guidewire_angle + pcfg.guidewire_drift * np.sin(
        2.0 * np.pi * p / pcfg.n_frames)
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    return np.abs(_wrap_angle(thetas - center)) <= pcfg.guidewire_width / 2.0


def simulate_pullback(vol: Volume3, c: Centerline, gt_params: TransformParams,
                      pcfg: PullbackConfig, polar_cfg: PolarConfig,
                      mpr_labels: np.ndarray):
    """Manufacture the fixed pullback image from a known warp.

    The volume is sampled over the warped geometry (strict: frames leaving
    the centerline extent raise), remapped by the monotone intensity map,
    multiplied by speckle, and overlaid with the guidewire wedge. Labels are
    transported through the warp; the wedge supplies exact G labels.

    Returns (PolarImage, GroundTruth).
    """
    pcfg.validate()
    out = sample_warped(vol, c, gt_params, polar_cfg, pcfg.n_frames,
                        pcfg.frame_spacing, strict=True)
    polar, geom = out
    dead = np.all(polar.data == 0.0, axis=(0, 1))
    if np.any(dead):
        raise OutOfExtentError(
            f"warp pushed frames fully outside the volume: {np.nonzero(dead)[0].tolist()}",
            frames=np.nonzero(dead)[0])

    data = _intensity_remap(polar.data, pcfg.gamma, pcfg.map_scale)
    if pcfg.speckle_sigma > 0.0:
        rng = np.random.default_rng(pcfg.seed)
        noise = rng.normal(0.0, pcfg.speckle_sigma, size=data.shape)
        data = data * np.exp(noise - 0.5 * pcfg.speckle_sigma**2)

    n_theta = polar_cfg.n_theta
    wire = np.zeros((n_theta, pcfg.n_frames), dtype=bool)
    if pcfg.guidewire:
        edge = int(round(pcfg.wire_edge_mm / polar_cfg.dr))
        for p in range(pcfg.n_frames):
            cols = _wedge_columns(pcfg, n_theta, p)
            data[:edge, cols, p] = pcfg.wire_brightness
            data[edge:, cols, p] = 0.0
            wire[:, p] = cols

    fixed = PolarImage(data=data, config=polar_cfg, z_positions=polar.z_positions)
    bc = transport_labels(mpr_labels, polar_cfg.dz, gt_params, pcfg.n_frames,
                          pcfg.frame_spacing)
    labels = np.concatenate([wire[None].astype(np.float64), bc], axis=0)

    t_axes = np.cross(geom.u_axes, geom.v_axes)
    arc = np.concatenate(([0.0], np.cumsum(
        np.linalg.norm(np.diff(geom.origins, axis=0), axis=1))))
    reference = Centerline(points=geom.origins, u=geom.u_axes, v=geom.v_axes,
                           t=t_axes, arc_length=arc)
    gt = GroundTruth(params=gt_params, labels=labels, classes=("G", "B", "C"),
                     reference_centerline=reference, mpr_labels=mpr_labels,
                     label_spacing=polar_cfg.dz)
    return fixed, gt
