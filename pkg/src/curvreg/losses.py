"""Differentiable similarity and regularization terms.

The composite objective is dice_ce + masked_nmi + alpha * reg_loss. Every
term exposes analytic gradients w.r.t. its direct inputs; the registration
module chains them through the sampler and detector to the transform
parameters. The parameter-vector layout used for gradients is
[s_z, t_z, theta_0..F-1, t_u_0..F-1, t_v_0..F-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import DegenerateHistogramError, DegenerateMaskError

DICE_EPS = 1e-5
_LOG_CLIP = 1e-12
_TAP_RADIUS = 2  # window taps per axis: 2*_TAP_RADIUS + 1


@dataclass
class LossValue:
    """Scalar loss with optional gradient in parameter-vector layout."""

    value: float
    gradients: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"loss value must be finite, got {self.value}")


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


# ---------------------------------------------------------------------------
# Dice + cross-entropy
# ---------------------------------------------------------------------------

def dice_ce(pred, target, with_grad: bool = False):
    """Combined soft-Dice and cross-entropy between probability maps.

    value = sum_c [(1 - dice_c) + bce_c] / n_classes with smoothing
    DICE_EPS in the Dice numerator and denominator; the target acts as soft
    labels for the cross-entropy term (mean over bins).

    Returns the value, and d(value)/d(pred) of the same shape when requested.
    """
    p = _as_array(getattr(pred, "probs", pred))
    t = _as_array(getattr(target, "probs", target))
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    if p.ndim == 2:
        p = p[None]
        t = t[None]
    n_classes = p.shape[0]
    n_bins = p[0].size

    pc = np.clip(p, _LOG_CLIP, 1.0)
    qc = np.clip(1.0 - p, _LOG_CLIP, 1.0)
    value = 0.0
    grad = np.zeros_like(p) if with_grad else None
    for c in range(n_classes):
        inter = float(np.sum(p[c] * t[c]))
        sums = float(np.sum(p[c]) + np.sum(t[c]))
        dice = (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
        bce = float(-np.sum(xlogy(t[c], pc[c]) + xlogy(1.0 - t[c], qc[c]))) / n_bins
        value += (1.0 - dice) + bce
        if with_grad:
            ddice = (2.0 * t[c] * (sums + DICE_EPS) - (2.0 * inter + DICE_EPS)) / (sums + DICE_EPS) ** 2
            dbce = (-(t[c] / pc[c]) + (1.0 - t[c]) / qc[c]) / n_bins
            grad[c] = (-ddice + dbce) / n_classes
    value /= n_classes

    if with_grad:
        return value, grad
    return value


# ---------------------------------------------------------------------------
# Masked NMI with Gaussian Parzen histograms
# ---------------------------------------------------------------------------

def _parzen_weights(values: np.ndarray, bins: int, sigma: float):
    """Per-sample normalized window weights over padded histogram bins.

    Values must be pre-normalized to [0, 1]. The bin domain is padded by the
    tap radius on both sides so windows are never clipped (this makes the
    estimator exactly shift-invariant over bins, hence invariant under
    bijective bin relabeling). Returns (tap bin indices into the padded
    domain (N, T), weights (N, T), d weights / d bin-coordinate (N, T)).
    """
    xi = values * bins - 0.5
    k0 = np.rint(xi).astype(np.int64)
    offsets = np.arange(-_TAP_RADIUS, _TAP_RADIUS + 1)
    k = k0[:, None] + offsets[None, :]
    d = k - xi[:, None]
    g = np.exp(-0.5 * (d / sigma) ** 2)
    gsum = g.sum(axis=1, keepdims=True)
    w = g / gsum
    # d g / d xi = g * d / sigma^2 ; normalize through the softmax-style quotient
    gp = g * d / sigma**2
    dw = (gp - w * gp.sum(axis=1, keepdims=True)) / gsum
    return k + _TAP_RADIUS + 1, w, dw


def _padded(bins: int) -> int:
    return bins + 2 * (_TAP_RADIUS + 1)


def _joint_histogram(ka, wa, kb, wb, bins: int) -> np.ndarray:
    nb = _padded(bins)
    h = np.zeros(nb * nb)
    for da in range(wa.shape[1]):
        base = ka[:, da] * nb
        for db in range(wb.shape[1]):
            h += np.bincount(base + kb[:, db], weights=wa[:, da] * wb[:, db],
                             minlength=nb * nb)
    return h.reshape(nb, nb) / wa.shape[0]


def _entropy(p: np.ndarray) -> float:
    return float(-np.sum(xlogy(p, p)))


def _normalize_minmax(x: np.ndarray):
    lo = float(x.min())
    hi = float(x.max())
    if hi - lo <= 0.0:
        raise DegenerateHistogramError("constant image: cannot build a histogram")
    return (x - lo) / (hi - lo), lo, hi


def _soft_nmi_ratio(ka, wa, kb, wb, bins):
    joint = _joint_histogram(ka, wa, kb, wb, bins)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    h_ab = _entropy(joint)
    h_a = _entropy(pa)
    h_b = _entropy(pb)
    if h_ab <= 0.0:
        raise DegenerateHistogramError("joint histogram carries no information")
    return (h_a + h_b) / h_ab, joint, pa, pb, h_a, h_b, h_ab


def masked_nmi(a, b, mask: np.ndarray | None = None, bins: int = 32,
               sigma_bins: float = 0.5, with_grad: bool = False,
               fixed_cache: dict | None = None):
    """Normalized mutual information of two polar images outside a mask.

    All radial samples at unmasked (theta, z) bins enter the estimate; each
    image is min-max normalized over those voxels, and soft histograms are
    built with Gaussian Parzen windows (sigma in bin widths). The soft ratio
    S(x, y) = (H(x) + H(y)) / H(x, y) is self-calibrated,

        NMI(a, b) = 2 * S(a, b) / sqrt(S(a, a) * S(b, b)),

    which keeps the estimator smooth while NMI(a, a) = 2 exactly. The loss
    value is -NMI. Gradients, when requested, are w.r.t. b's voxels (zero at
    masked bins).

    ``fixed_cache``, when given, memoizes the a-side window weights and
    self-ratio across calls; the caller owns it and must hand over a fresh
    dict whenever (a, mask, bins, sigma) change.

    Raises
    ------
    DegenerateMaskError
        Fewer than 10% of (theta, z) bins unmasked.
    DegenerateHistogramError
        Either image is constant over the unmasked voxels.
    """
    xa = _as_array(a)
    xb = _as_array(b)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xa.shape[1:]:
            raise ValueError("mask must cover the (theta, z) grid")
        keep = ~mask
        if keep.mean() < 0.10:
            raise DegenerateMaskError(
                f"only {keep.mean():.1%} of bins unmasked (need >= 10%)")
    else:
        keep = np.ones(xa.shape[1:], dtype=bool)

    va = xa[:, keep].ravel()
    vb = xb[:, keep].ravel()
    if fixed_cache is not None and "ka" in fixed_cache:
        ka, wa, s_aa = fixed_cache["ka"], fixed_cache["wa"], fixed_cache["s_aa"]
    else:
        na, _, _ = _normalize_minmax(va)
        ka, wa, _ = _parzen_weights(na, bins, sigma_bins)
        s_aa, *_ = _soft_nmi_ratio(ka, wa, ka, wa, bins)
        if fixed_cache is not None:
            fixed_cache.update(ka=ka, wa=wa, s_aa=s_aa)
    nb, lo_b, hi_b = _normalize_minmax(vb)
    kb, wb, dwb = _parzen_weights(nb, bins, sigma_bins)

    s_ab, j_ab, _, pb, h_a, h_b, h_ab = _soft_nmi_ratio(ka, wa, kb, wb, bins)
    s_bb, j_bb, _, _, _, _, h_bb = _soft_nmi_ratio(kb, wb, kb, wb, bins)

    root = np.sqrt(s_aa * s_bb)
    nmi = 2.0 * s_ab / root
    if not with_grad:
        return -nmi

    n = va.size
    # dS_ab w.r.t. b-side tap weights: through H(a,b) and H(b)
    d_hab = -(np.log(np.clip(j_ab, 1e-300, None)) + 1.0) / n       # (bins, bins)
    d_hb = -(np.log(np.clip(pb, 1e-300, None)) + 1.0) / n          # (bins,)
    # gather sum_da wa * d_hab[ka, kb_tap] for every b tap
    gab = np.zeros_like(wb)
    for da in range(wa.shape[1]):
        gab += wa[:, da][:, None] * d_hab[ka[:, da][:, None], kb]
    ds_ab = (d_hb[kb] * h_ab - (h_a + h_b) * gab) / h_ab**2

    # dS_bb: joint of (b, b); y appears on both axes (factor 2 by symmetry)
    d_hbb = -(np.log(np.clip(j_bb, 1e-300, None)) + 1.0) / n
    gbb = np.zeros_like(wb)
    for da in range(wb.shape[1]):
        gbb += wb[:, da][:, None] * d_hbb[kb[:, da][:, None], kb]
    ds_bb = 2.0 * (d_hb[kb] * h_bb - 2.0 * h_b * gbb) / h_bb**2

    # chain to the bin coordinate xi, then to raw intensities
    dnmi_dw_ab = 2.0 / root
    dnmi_dw_bb = -s_ab * s_aa / root**3
    dxi = np.sum((dnmi_dw_ab * ds_ab + dnmi_dw_bb * ds_bb) * dwb, axis=1)

    scale = bins / (hi_b - lo_b)
    dvb = dxi * scale
    # min-max endpoints move with their defining voxels
    corr_lo = float(np.sum(dxi * (nb - 1.0))) * scale
    corr_hi = float(np.sum(dxi * (-nb))) * scale
    dvb[int(np.argmin(vb))] += corr_lo
    dvb[int(np.argmax(vb))] += corr_hi

    grad = np.zeros_like(xb)
    grad[:, keep] = dvb.reshape(xa.shape[0], -1)
    return -nmi, -grad


# ---------------------------------------------------------------------------
# Transform smoothness
# ---------------------------------------------------------------------------

def _first_diff_sq(x: np.ndarray):
    d = np.diff(x)
    g = np.zeros_like(x)
    g[:-1] -= 2.0 * d
    g[1:] += 2.0 * d
    return float(np.sum(d * d)), g


def reg_loss(params, with_grad: bool = False):
    """Smoothness penalty on per-frame parameters.

    Sum of squared first differences of theta, t_u and t_v over frames;
    constant offsets are free. The gradient vector follows the
    [s_z, t_z, theta, t_u, t_v] layout (zeros for the globals).
    """
    theta = np.asarray(params.theta, dtype=np.float64)
    t_u = np.asarray(params.t_u, dtype=np.float64)
    t_v = np.asarray(params.t_v, dtype=np.float64)
    if theta.size < 2:
        raise ValueError("reg_loss needs >= 2 frames")
    v_th, g_th = _first_diff_sq(theta)
    v_u, g_u = _first_diff_sq(t_u)
    v_v, g_v = _first_diff_sq(t_v)
    value = v_th + v_u + v_v
    if not with_grad:
        return value
    grad = np.concatenate([[0.0, 0.0], g_th, g_u, g_v])
    return value, grad


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

@dataclass
class TotalLoss:
    """Composite loss with per-component values and input-space gradients."""

    value: float
    dice_ce: float
    nmi: float
    reg: float
    d_pred: np.ndarray | None = None       # d dice_ce / d moving feature map
    d_moving: np.ndarray | None = None     # d nmi / d moving polar voxels
    d_params_reg: np.ndarray | None = None  # unweighted reg gradient, layout vector


def total_loss(fixed_fm, moving_fm, fixed_polar, moving_polar, mask, params,
               alpha: float, bins: int = 32, with_grads: bool = False,
               nmi_cache: dict | None = None) -> TotalLoss:
    """dice_ce(moving_fm, fixed_fm) + masked_nmi(fixed, moving) + alpha*reg.

    Value-level composition over precomputed images and feature maps; the
    chain from image space back to transform parameters (through sampling and
    detection) is assembled by the registration objective.
    """
    if with_grads:
        v_dice, d_pred = dice_ce(moving_fm, fixed_fm, with_grad=True)
        v_nmi, d_moving = masked_nmi(fixed_polar, moving_polar, mask, bins=bins,
                                     with_grad=True, fixed_cache=nmi_cache)
        v_reg, d_reg = reg_loss(params, with_grad=True)
        return TotalLoss(value=v_dice + v_nmi + alpha * v_reg,
                         dice_ce=v_dice, nmi=v_nmi, reg=v_reg,
                         d_pred=d_pred, d_moving=d_moving, d_params_reg=d_reg)
    v_dice = dice_ce(moving_fm, fixed_fm)
    v_nmi = masked_nmi(fixed_polar, moving_polar, mask, bins=bins,
                       fixed_cache=nmi_cache)
    v_reg = reg_loss(params)
    return TotalLoss(value=v_dice + v_nmi + alpha * v_reg,
                     dice_ce=v_dice, nmi=v_nmi, reg=v_reg)
