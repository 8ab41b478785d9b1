"""Transform model, pre-alignment, and gradient-based local optimization.

A transform carries two globals (longitudinal scale s_z and shift t_z, both
acting on the nominal pullback coordinate z_p = p * frame_spacing) and three
locals per frame (in-plane rotation theta_p and displacements t_u, t_v along
the interpolated frame axes). Frame p samples the moving volume at arc
position s_z * z_p + t_z; its plane axes are the interpolated (u, v) rotated
in-plane by theta_p:

    u' = cos(theta) u + sin(theta) v,   v' = -sin(theta) u + cos(theta) v,

and its origin is the interpolated centerline point displaced by
t_u * u + t_v * v. An optional mirror flag flips v before everything else,
representing the anti-clockwise plane orientation probed during
pre-alignment. Negative s_z traverses the centerline reversed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .errors import NonFiniteLossError, OutOfExtentError
from .features import FeatureMap, longitudinal_profile
from .geometry import (Centerline, PolarConfig, PolarImage, Volume3,
                       interpolate_frames, polar_transform,
                       sample_polar_at_frames)


@dataclass
class TransformParams:
    """Optimization variable: global (s_z, t_z) plus per-frame locals."""

    s_z: float
    t_z: float
    theta: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    mirror: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.t_u = np.asarray(self.t_u, dtype=np.float64)
        self.t_v = np.asarray(self.t_v, dtype=np.float64)

    @classmethod
    def identity(cls, n_frames: int) -> "TransformParams":
        zeros = np.zeros(n_frames)
        return cls(s_z=1.0, t_z=0.0, theta=zeros.copy(), t_u=zeros.copy(),
                   t_v=zeros.copy())

    @property
    def n_frames(self) -> int:
        return self.theta.size

    def validate(self, scale_bounds=(0.5, 2.0)) -> None:
        if not (scale_bounds[0] <= abs(self.s_z) <= scale_bounds[1]):
            raise ValueError(f"|s_z| = {abs(self.s_z):.3g} outside {scale_bounds}")
        if not (self.theta.size == self.t_u.size == self.t_v.size):
            raise ValueError("per-frame arrays must have equal length")
        for name in ("s_z", "t_z"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("theta", "t_u", "t_v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.s_z, self.t_z], self.theta, self.t_u, self.t_v])

    @classmethod
    def from_vector(cls, vec: np.ndarray, mirror: bool = False) -> "TransformParams":
        n = (vec.size - 2) // 3
        return cls(s_z=float(vec[0]), t_z=float(vec[1]),
                   theta=vec[2:2 + n].copy(), t_u=vec[2 + n:2 + 2 * n].copy(),
                   t_v=vec[2 + 2 * n:].copy(), mirror=mirror)

    def copy(self) -> "TransformParams":
        return TransformParams.from_vector(self.to_vector(), mirror=self.mirror)


@dataclass
class WarpedGeometry:
    """World-space origins and rotated plane axes per pullback frame."""

    origins: np.ndarray
    u_axes: np.ndarray
    v_axes: np.ndarray
    arc: np.ndarray         # clamped arc positions actually sampled
    arc_raw: np.ndarray     # requested arc positions before clamping
    oob: np.ndarray         # frames whose request fell outside the extent


@dataclass
class OptimizerConfig:
    """Settings of pre-alignment and the Adam refinement loop."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    alpha: float = 1000.0
    nmi_bins: int = 32
    conv_rtol: float = 1e-4
    conv_iters: int = 3
    max_iters: int = 2000
    t_z_step: float | None = None      # defaults to the polar dz
    theta_step: float | None = None    # defaults to one angular bin
    scale_bounds: tuple = (0.5, 2.0)
    scale_init: str = "unit"           # "unit" or "length_ratio"
    min_overlap: float = 0.5
    min_coverage: float = 0.75
    oob_weight: float = 10.0
    landmark_floor: float = 0.5

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.conv_rtol <= 0:
            raise ValueError("conv_rtol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.scale_init not in ("unit", "length_ratio"):
            raise ValueError("scale_init must be 'unit' or 'length_ratio'")


# ---------------------------------------------------------------------------
# Warp + differentiable sampling
# ---------------------------------------------------------------------------

def _warp_frames(c: Centerline, params: TransformParams, n_frames: int,
                 frame_spacing: float, with_derivatives: bool = False):
    z_nom = np.arange(n_frames) * frame_spacing
    arc_raw = params.s_z * z_nom + params.t_z
    length = c.length
    oob = (arc_raw < 0.0) | (arc_raw > length)
    arc = np.clip(arc_raw, 0.0, length)
    fr = interpolate_frames(c, arc, with_derivatives=with_derivatives)

    u = fr.u
    v = -fr.v if params.mirror else fr.v
    cos_p = np.cos(params.theta)[:, None]
    sin_p = np.sin(params.theta)[:, None]
    u_rot = cos_p * u + sin_p * v
    v_rot = -sin_p * u + cos_p * v
    origins = fr.pos + params.t_u[:, None] * u + params.t_v[:, None] * v

    geom = WarpedGeometry(origins=origins, u_axes=u_rot, v_axes=v_rot,
                          arc=arc, arc_raw=arc_raw, oob=oob)
    if not with_derivatives:
        return geom, fr, (u, v, cos_p, sin_p, z_nom)
    dv = -fr.dv if params.mirror else fr.dv
    return geom, fr, (u, v, cos_p, sin_p, z_nom, fr.du, dv)


def warp_geometry(params: TransformParams, c: Centerline, n_frames: int,
                  frame_spacing: float, strict: bool = True) -> WarpedGeometry:
    """Apply the transform to the centerline, yielding per-frame geometry.

    With strict=True (the public contract), frames whose arc position
    s_z * z_p + t_z falls outside the centerline extent raise
    OutOfExtentError naming them; otherwise positions are clamped and
    reported through ``oob``.
    """
    c.validate()
    geom, _, _ = _warp_frames(c, params, n_frames, frame_spacing)
    if strict and geom.oob.any():
        frames = np.nonzero(geom.oob)[0]
        raise OutOfExtentError(
            f"{frames.size} frames outside the centerline extent "
            f"[0, {c.length:.2f}] mm: frames {frames[:8].tolist()}"
            + ("..." if frames.size > 8 else ""), frames=frames)
    return geom


@dataclass
class WarpSampleGrads:
    """Per-voxel partials of warped samples w.r.t. the transform entries."""

    d_theta: np.ndarray   # (n_r, n_theta, F)
    d_tu: np.ndarray
    d_tv: np.ndarray
    d_arc: np.ndarray     # zeroed where the frame was clamped
    z_nominal: np.ndarray

    def param_grad(self, upstream: np.ndarray) -> np.ndarray:
        """Contract voxel-space upstream gradients into the layout vector."""
        g_theta = np.einsum("rtp,rtp->p", upstream, self.d_theta)
        g_tu = np.einsum("rtp,rtp->p", upstream, self.d_tu)
        g_tv = np.einsum("rtp,rtp->p", upstream, self.d_tv)
        g_arc = np.einsum("rtp,rtp->p", upstream, self.d_arc)
        g_sz = float(np.sum(g_arc * self.z_nominal))
        g_tz = float(np.sum(g_arc))
        return np.concatenate([[g_sz, g_tz], g_theta, g_tu, g_tv])


def sample_warped(vol: Volume3, c: Centerline, params: TransformParams,
                  cfg: PolarConfig, n_frames: int, frame_spacing: float,
                  with_grads: bool = False, strict: bool = False):
    """Polar-sample the moving volume over the warped geometry.

    Returns (PolarImage, WarpedGeometry[, WarpSampleGrads]). Identity
    parameters on a centerline resampled at cfg.dz reproduce
    geometry.polar_transform exactly (same code path). Out-of-extent frames
    are clamped unless strict.
    """
    out = _warp_frames(c, params, n_frames, frame_spacing,
                       with_derivatives=with_grads)
    geom, fr, aux = out
    if strict and geom.oob.any():
        frames = np.nonzero(geom.oob)[0]
        raise OutOfExtentError(
            f"warp leaves centerline extent at frames {frames[:8].tolist()}",
            frames=frames)

    frames_for_sampling = replace(fr, pos=geom.origins, u=geom.u_axes,
                                  v=geom.v_axes)
    z_nom = aux[4]
    if not with_grads:
        data = sample_polar_at_frames(vol, frames_for_sampling, cfg)
        return PolarImage(data=data, config=cfg, z_positions=z_nom), geom

    u, v, cos_p, sin_p, z_nom, du, dv = aux
    data, spatial = sample_polar_at_frames(vol, frames_for_sampling, cfg,
                                           with_gradient=True)
    r = cfg.radii
    cos_t = np.cos(cfg.thetas)
    sin_t = np.sin(cfg.thetas)

    # in-plane rotation: d dir / d theta_p = cos_t * v_rot - sin_t * u_rot
    ddir_dtheta = (cos_t[:, None, None] * geom.v_axes[None]
                   - sin_t[:, None, None] * geom.u_axes[None])
    d_theta = r[:, None, None] * np.einsum("rtpk,tpk->rtp", spatial, ddir_dtheta)
    d_tu = np.einsum("rtpk,pk->rtp", spatial, u)
    d_tv = np.einsum("rtpk,pk->rtp", spatial, v)

    # longitudinal: position moves with the interpolated point and frames
    du_rot = cos_p * du + sin_p * dv
    dv_rot = -sin_p * du + cos_p * dv
    dpos = fr.dpos + params.t_u[:, None] * du + params.t_v[:, None] * dv
    ddir_darc = cos_t[:, None, None] * du_rot[None] + sin_t[:, None, None] * dv_rot[None]
    dpts_darc = dpos[None, None] + r[:, None, None, None] * ddir_darc[None]
    d_arc = np.einsum("rtpk,rtpk->rtp", spatial, dpts_darc)
    d_arc[:, :, geom.oob] = 0.0

    grads = WarpSampleGrads(d_theta=d_theta, d_tu=d_tu, d_tv=d_tv,
                            d_arc=d_arc, z_nominal=z_nom)
    return PolarImage(data=data, config=cfg, z_positions=z_nom), geom, grads


def extent_penalty(geom: WarpedGeometry, z_nominal: np.ndarray, weight: float,
                   with_grad: bool = False):
    """Quadratic penalty keeping requested arcs inside the centerline."""
    excess = geom.arc_raw - geom.arc
    value = weight * float(np.sum(excess**2))
    if not with_grad:
        return value
    g_tz = 2.0 * weight * float(np.sum(excess))
    g_sz = 2.0 * weight * float(np.sum(excess * z_nominal))
    return value, g_sz, g_tz


# ---------------------------------------------------------------------------
# Case bundle and the full-chain objective
# ---------------------------------------------------------------------------

@dataclass
class RegistrationCase:
    """Everything a single registration run needs."""

    fixed_polar: PolarImage
    fixed_fm: FeatureMap
    mask: np.ndarray
    moving_vol: Volume3
    moving_c: Centerline
    polar_cfg: PolarConfig
    n_frames: int
    frame_spacing: float
    detector: object  # callable(PolarImage, TransformParams, with_jacobian)
    nmi_cache: dict = field(default_factory=dict, repr=False)

    @property
    def fixed_bc(self) -> FeatureMap:
        return self.fixed_fm.subset(("B", "C"))


def evaluate_objective(case: RegistrationCase, params: TransformParams,
                       cfg: OptimizerConfig, with_grads: bool = False):
    """Full composite objective with gradients chained to the parameters.

    Returns (LossValue, components) where components maps each term
    ("dice_ce", "nmi", "reg", "penalty") to its own LossValue; component
    gradients are all in the layout vector so finite-difference checks can
    probe them independently.
    """
    if not with_grads:
        polar_m, geom = sample_warped(case.moving_vol, case.moving_c, params,
                                      case.polar_cfg, case.n_frames,
                                      case.frame_spacing)
        fm_m = case.detector(polar_m, params, with_jacobian=False)
        tl = losses.total_loss(case.fixed_bc, fm_m, case.fixed_polar, polar_m,
                               case.mask, params, cfg.alpha, bins=cfg.nmi_bins,
                               nmi_cache=case.nmi_cache)
        pen = extent_penalty(geom, np.arange(case.n_frames) * case.frame_spacing,
                             cfg.oob_weight)
        comps = {"dice_ce": losses.LossValue(tl.dice_ce),
                 "nmi": losses.LossValue(tl.nmi),
                 "reg": losses.LossValue(tl.reg),
                 "penalty": losses.LossValue(pen)}
        return losses.LossValue(tl.value + pen), comps

    polar_m, geom, wgrads = sample_warped(case.moving_vol, case.moving_c,
                                          params, case.polar_cfg, case.n_frames,
                                          case.frame_spacing, with_grads=True)
    fm_m, det_vjp = case.detector(polar_m, params, with_jacobian=True)
    tl = losses.total_loss(case.fixed_bc, fm_m, case.fixed_polar, polar_m,
                           case.mask, params, cfg.alpha, bins=cfg.nmi_bins,
                           with_grads=True, nmi_cache=case.nmi_cache)
    z_nom = np.arange(case.n_frames) * case.frame_spacing
    pen, pen_sz, pen_tz = extent_penalty(geom, z_nom, cfg.oob_weight,
                                         with_grad=True)

    n_par = 2 + 3 * case.n_frames
    if det_vjp is None:
        g_dice = np.zeros(n_par)
    else:
        g_dice = wgrads.param_grad(det_vjp(tl.d_pred))
    g_nmi = wgrads.param_grad(tl.d_moving)
    g_reg = tl.d_params_reg  # unweighted; alpha applies in the total
    g_pen = np.zeros(n_par)
    g_pen[0] = pen_sz
    g_pen[1] = pen_tz

    for name, val in (("dice_ce", tl.dice_ce), ("nmi", tl.nmi),
                      ("reg", tl.reg), ("penalty", pen)):
        if not np.isfinite(val):
            raise NonFiniteLossError(name, val)

    comps = {"dice_ce": losses.LossValue(tl.dice_ce, g_dice),
             "nmi": losses.LossValue(tl.nmi, g_nmi),
             "reg": losses.LossValue(tl.reg, g_reg),
             "penalty": losses.LossValue(pen, g_pen)}
    total = losses.LossValue(tl.value + pen,
                             g_dice + g_nmi + cfg.alpha * g_reg + g_pen)
    return total, comps


def make_moving_provider(case: RegistrationCase):
    """params -> moving feature map on the fixed (theta, frame) grid."""

    def provider(params: TransformParams) -> FeatureMap:
        polar_m, _ = sample_warped(case.moving_vol, case.moving_c, params,
                                   case.polar_cfg, case.n_frames,
                                   case.frame_spacing)
        return case.detector(polar_m, params, with_jacobian=False)

    return provider


# ---------------------------------------------------------------------------
# Pre-alignment
# ---------------------------------------------------------------------------

@dataclass
class PrealignInfo:
    low_confidence: bool
    sign_losses: dict = field(default_factory=dict)
    t_z: float = 0.0
    theta0: float = 0.0
    mirror: bool = False


def _signal_dice_ce(moving_sig: np.ndarray, fixed_sig: np.ndarray) -> float:
    return losses.dice_ce(moving_sig, fixed_sig)


def prealign(case: RegistrationCase, cfg: OptimizerConfig,
             provider=None) -> tuple:
    """Coarse grid initialization of the transform.

    Guided purely by the Dice/cross-entropy term: first the pullback
    direction and longitudinal shift via 1D landmark signals (max over
    theta), then a uniform in-plane rotation over both plane orientations on
    the full (theta, z) maps. Local displacements start at zero. Ties break
    toward the smallest |t_z|, then the smallest |theta0|, then positive s_z.

    Returns (TransformParams, PrealignInfo).
    """
    cfg.validate()
    custom_provider = provider is not None
    if provider is None:
        provider = make_moving_provider(case)
    n_frames = case.n_frames
    fs = case.frame_spacing
    length = case.moving_c.length
    pullback = (n_frames - 1) * fs
    dz = cfg.t_z_step if cfg.t_z_step is not None else case.polar_cfg.dz

    if cfg.scale_init == "length_ratio":
        mag = float(np.clip(length / pullback, *cfg.scale_bounds))
    else:
        mag = 1.0

    fixed_sig = longitudinal_profile(case.fixed_bc)
    low_confidence = float(np.max(case.fixed_bc.probs)) < cfg.landmark_floor

    z_nom = np.arange(n_frames) * fs

    # fast path: when frames are spaced exactly like the polar grid and the
    # grid step is one bin, every (sign, t_z) candidate map is a column slice
    # of the moving feature map computed once on the centerline's own grid
    grid_aligned = (not custom_provider and mag == 1.0
                    and abs(fs - dz) < 1e-12
                    and (cfg.t_z_step is None or abs(cfg.t_z_step - dz) < 1e-12))
    base_maps = {}
    if grid_aligned:
        mpr_polar = polar_transform(case.moving_vol, case.moving_c, case.polar_cfg)
        n_src = mpr_polar.n_z
        src_params = TransformParams(s_z=1.0, t_z=0.0, theta=np.zeros(n_src),
                                     t_u=np.zeros(n_src), t_v=np.zeros(n_src))
        src_fm = case.detector(mpr_polar, src_params, with_jacobian=False)

        def candidate_fm(sign: float, t_z: float) -> FeatureMap:
            k = int(round(t_z / dz))
            idx = (np.round(sign * np.arange(n_frames)).astype(int) + k)
            idx = np.clip(idx, 0, n_src - 1)
            return FeatureMap(probs=src_fm.probs[:, :, idx], classes=src_fm.classes)
    else:
        def candidate_fm(sign: float, t_z: float) -> FeatureMap:
            p = TransformParams(s_z=sign * mag, t_z=float(t_z),
                                theta=np.zeros(n_frames),
                                t_u=np.zeros(n_frames), t_v=np.zeros(n_frames))
            return provider(p)

    def t_z_candidates(sign: float) -> np.ndarray:
        # offsets keeping at least min_overlap of frames on the centerline
        k_lo = int(np.floor((-abs(sign) * max(mag * pullback, pullback)) / dz)) - 2
        k_hi = int(np.ceil((length + mag * pullback) / dz)) + 2
        cands = []
        for k in range(k_lo, k_hi + 1):
            t_z = k * dz
            arcs = sign * mag * z_nom + t_z
            inside = np.mean((arcs >= 0.0) & (arcs <= length))
            if inside >= cfg.min_overlap:
                cands.append(t_z)
        return np.asarray(cands)

    best_per_sign = {}
    for sign in (1.0, -1.0):
        cands = t_z_candidates(sign)
        if cands.size == 0:
            continue
        rows = []
        for t_z in cands:
            sig = longitudinal_profile(candidate_fm(sign, t_z))
            rows.append((_signal_dice_ce(sig, fixed_sig), abs(t_z), t_z))
        rows.sort(key=lambda r: (r[0], r[1]))
        best_per_sign[sign] = rows[0]

    if not best_per_sign:
        raise OutOfExtentError("no feasible t_z offsets: centerline too short "
                               "for the requested overlap")

    # prefer positive direction on exact ties
    sign = min(best_per_sign, key=lambda s: (best_per_sign[s][0], -s))
    _, _, t_z = best_per_sign[sign]

    # uniform rotation: circular shifts of the detector map are exactly the
    # rotation candidates (the detector is per-column); mirrored orientation
    # flips the theta axis
    n_theta = case.polar_cfg.n_theta
    base_params = TransformParams(s_z=sign * mag, t_z=float(t_z),
                                  theta=np.zeros(n_frames),
                                  t_u=np.zeros(n_frames), t_v=np.zeros(n_frames))
    base_fm = candidate_fm(sign, t_z)
    fixed_map = case.fixed_bc.probs
    theta_step = cfg.theta_step if cfg.theta_step is not None else 2.0 * np.pi / n_theta
    use_shifts = cfg.theta_step is None

    candidates = []
    if use_shifts:
        flipped = base_fm.probs[:, (-np.arange(n_theta)) % n_theta, :]
        for mirror in (False, True):
            src = flipped if mirror else base_fm.probs
            for j in range(n_theta):
                theta0 = j * theta_step
                principal = theta0 if theta0 <= np.pi else theta0 - 2.0 * np.pi
                loss = losses.dice_ce(np.roll(src, -j, axis=1), fixed_map)
                candidates.append((loss, abs(principal), mirror, principal))
    else:
        n_cand = max(1, int(round(2.0 * np.pi / theta_step)))
        for mirror in (False, True):
            for j in range(n_cand):
                theta0 = j * theta_step
                principal = theta0 if theta0 <= np.pi else theta0 - 2.0 * np.pi
                p = TransformParams(s_z=base_params.s_z, t_z=base_params.t_z,
                                    theta=np.full(n_frames, theta0),
                                    t_u=np.zeros(n_frames),
                                    t_v=np.zeros(n_frames), mirror=mirror)
                loss = losses.dice_ce(provider(p).probs, fixed_map)
                candidates.append((loss, abs(principal), mirror, principal))

    candidates.sort(key=lambda r: (r[0], r[1], r[2]))
    _, _, mirror, theta0 = candidates[0]

    params = TransformParams(s_z=sign * mag, t_z=float(t_z),
                             theta=np.full(n_frames, theta0),
                             t_u=np.zeros(n_frames), t_v=np.zeros(n_frames),
                             mirror=mirror)
    info = PrealignInfo(low_confidence=low_confidence,
                        sign_losses={s: r[0] for s, r in best_per_sign.items()},
                        t_z=float(t_z), theta0=float(theta0), mirror=mirror)
    return params, info


# ---------------------------------------------------------------------------
# Local optimization (Adam with constant learning rate)
# ---------------------------------------------------------------------------

def _smoothness_prox_matrix(n_frames: int, strength: float) -> np.ndarray:
    """Banded (lower) form of I + 2*strength*D^T D for solveh_banded."""
    diag = np.full(n_frames, 1.0 + 4.0 * strength)
    diag[0] = diag[-1] = 1.0 + 2.0 * strength
    sub = np.full(n_frames, -2.0 * strength)
    sub[-1] = 0.0
    return np.vstack([diag, sub])


def optimize_local(init: TransformParams, case: RegistrationCase,
                   cfg: OptimizerConfig):
    """Jointly refine all parameters: proximal Adam with constant step size.

    The similarity terms (Dice/cross-entropy, masked NMI, extent penalty)
    drive Adam updates; the quadratic smoothness term alpha*reg is applied
    exactly afterwards as its proximal operator (a tridiagonal solve per
    per-frame block). Plain Adam on the summed gradient stalls here: with a
    large alpha the regularizer's stiff, oscillating gradient inflates the
    second moments and freezes even the regularizer's null space (uniform
    shifts), which is where alignment happens. The fixed points coincide
    with stationary points of the composite loss.

    Stops when the relative change of the NMI component stays below
    cfg.conv_rtol for cfg.conv_iters consecutive iterations, or at
    cfg.max_iters. Returns (params, trace, converged) with one trace row of
    component values per iteration.
    """
    from scipy.linalg import solveh_banded

    cfg.validate()
    vec = init.to_vector()
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    n = init.n_frames
    prox = _smoothness_prox_matrix(n, cfg.learning_rate * cfg.alpha)
    trace = []
    prev_nmi = None
    calm = 0
    converged = False
    best = (np.inf, vec.copy())

    for it in range(1, cfg.max_iters + 1):
        params = TransformParams.from_vector(vec, mirror=init.mirror)
        total, comps = evaluate_objective(case, params, cfg, with_grads=True)
        trace.append({"iter": it, "total": total.value,
                      "dice_ce": comps["dice_ce"].value,
                      "nmi": comps["nmi"].value, "reg": comps["reg"].value,
                      "penalty": comps["penalty"].value})
        if total.value < best[0]:
            best = (total.value, vec.copy())

        nmi = comps["nmi"].value
        if prev_nmi is not None:
            rel = abs(nmi - prev_nmi) / max(abs(prev_nmi), 1e-12)
            calm = calm + 1 if rel < cfg.conv_rtol else 0
            if calm >= cfg.conv_iters:
                converged = True
                break
        prev_nmi = nmi

        g = (comps["dice_ce"].gradients + comps["nmi"].gradients
             + comps["penalty"].gradients)
        if cfg.weight_decay > 0.0:
            g = g + cfg.weight_decay * vec
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**it)
        v_hat = v / (1.0 - cfg.beta2**it)
        vec = vec - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.alpha > 0.0:
            for block in range(3):
                lo = 2 + block * n
                vec[lo:lo + n] = solveh_banded(prox, vec[lo:lo + n], lower=True)
        # keep the scale inside its configured bounds, preserving direction
        sign = 1.0 if vec[0] >= 0 else -1.0
        vec[0] = sign * np.clip(abs(vec[0]), *cfg.scale_bounds)

    # Adam dithers at the learning-rate scale; return the best iterate seen,
    # which also makes the descent contract (final <= initial) structural
    return TransformParams.from_vector(best[1], mirror=init.mirror), trace, converged


# ---------------------------------------------------------------------------
# End-to-end registration
# ---------------------------------------------------------------------------

@dataclass
class RegistrationResult:
    params: TransformParams
    geometry: WarpedGeometry
    trace: list
    runtime_s: float
    converged: bool
    insufficient_landmarks: bool
    centerline_failure: bool
    prealign_params: TransformParams | None = None


def register(case: RegistrationCase, cfg: OptimizerConfig | None = None) -> RegistrationResult:
    """Pre-align then locally optimize; always returns a result with flags.

    Failure modes are surfaced rather than raised: a fixed image without
    landmarks sets insufficient_landmarks, a centerline too short to cover
    the pullback sets centerline_failure (local optimization is skipped for
    the latter since most frames would sample clamped geometry).
    """
    cfg = cfg or OptimizerConfig()
    cfg.validate()
    start = time.perf_counter()

    pullback = (case.n_frames - 1) * case.frame_spacing
    coverage = min(1.0, case.moving_c.length / max(pullback, 1e-9))
    centerline_failure = coverage < cfg.min_coverage

    if centerline_failure:
        # too little of the pullback can ever lie on the centerline; report
        # the failure instead of optimizing clamped geometry
        params0 = TransformParams.identity(case.n_frames)
        low_confidence = float(np.max(case.fixed_bc.probs)) < cfg.landmark_floor
        info = PrealignInfo(low_confidence=low_confidence)
        params, trace, converged = params0, [], False
    else:
        params0, info = prealign(case, cfg)
        params, trace, converged = optimize_local(params0, case, cfg)

    geom, _, _ = _warp_frames(case.moving_c, params, case.n_frames,
                              case.frame_spacing)
    return RegistrationResult(
        params=params, geometry=geom, trace=trace,
        runtime_s=time.perf_counter() - start, converged=converged,
        insufficient_landmarks=info.low_confidence,
        centerline_failure=centerline_failure, prealign_params=params0)
