"""(theta, z) feature probability maps from polar images.

Two detector flavors stand in for a trained classifier:

* an oracle that returns ground-truth labels (optionally noise-flipped and
  softly blurred), and
* a differentiable heuristic that reduces each radial intensity profile to
  per-class statistics through smooth (sigmoid / soft-max / soft run-length)
  operations, so gradients flow from the losses back to image intensities.

Class order is (G, B, C): guidewire, bifurcation, calcification. MPR-side
maps carry (B, C) only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import PolarImage

IVUS_CLASSES = ("G", "B", "C")
MPR_CLASSES = ("B", "C")

@dataclass
class FeatureMap:
    """Per-class probabilities on the (theta, z) grid."""

    probs: np.ndarray
    classes: tuple

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.classes = tuple(self.classes)

    def validate(self) -> None:
        if self.probs.ndim != 3 or self.probs.shape[0] != len(self.classes):
            raise ValueError("probs must have shape (n_class, n_theta, n_z)")
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def subset(self, names) -> "FeatureMap":
        idx = [self.class_index(n) for n in names]
        return FeatureMap(probs=self.probs[idx], classes=tuple(names))


@dataclass
class DetectorConfig:
    """Parameters of the oracle / heuristic detectors.

    Heuristic statistics per (theta, z) radial profile (smoothed along r):
    calcification uses a soft maximum over radii beyond calc_r_min_mm (the
    guidewire's bright near edge stays out of reach); bifurcation uses the
    soft contiguous lumen run length minus its per-slice mean over theta
    (excess extent in mm, insensitive to the local lumen caliber); the
    guidewire statistic is the intensity drop from the near band to the far
    band (bright reflection plus acoustic shadow).
    """

    kind: str = "heuristic"
    tau_calc: float = 1.25
    k_calc: float = 25.0
    tau_branch: float = 0.8
    k_branch: float = 8.0
    tau_wire: float = 1.3
    k_wire: float = 8.0
    lumen_level: float = 0.6
    run_sharpness: float = 12.0
    softmax_temp: float = 0.05
    calc_r_min_mm: float = 0.8
    smooth_window: int = 5
    near_band: tuple = (0, 8)
    far_band_frac: float = 1.0 / 3.0
    label_noise: float = 0.0
    seed: int = 0
    binarize_threshold: float = 0.5

    def validate(self) -> None:
        if self.kind not in ("oracle", "heuristic"):
            raise ValueError("kind must be 'oracle' or 'heuristic'")
        for name in ("tau_calc", "tau_branch", "tau_wire"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("k_calc", "k_branch", "k_wire", "run_sharpness", "softmax_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _blur_soft(probs: np.ndarray) -> np.ndarray:
    # small separable blur: theta wraps, z clamps at the ends
    out = 0.8 * probs + 0.1 * np.roll(probs, 1, axis=-2) + 0.1 * np.roll(probs, -1, axis=-2)
    padded = np.concatenate([out[..., :1], out, out[..., -1:]], axis=-1)
    return 0.8 * padded[..., 1:-1] + 0.1 * padded[..., :-2] + 0.1 * padded[..., 2:]


def detect_oracle(labels: np.ndarray, classes, cfg: DetectorConfig) -> FeatureMap:
    """Soft classifier stand-in built from ground-truth labels.

    Labels are flipped i.i.d. with probability cfg.label_noise (seeded), then
    blurred with a fixed small (theta, z) kernel so outputs look like soft
    classifier probabilities. With zero flip probability the 0.5-binarization
    of the output reproduces the labels exactly.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 3 or labels.shape[0] != len(classes):
        raise ValueError("labels must have shape (n_class, n_theta, n_z)")
    if cfg.label_noise > 0.0:
        rng = np.random.default_rng(cfg.seed)
        flips = rng.random(labels.shape) < cfg.label_noise
        labels = np.where(flips, 1.0 - labels, labels)
    fm = FeatureMap(probs=np.clip(_blur_soft(labels), 0.0, 1.0), classes=tuple(classes))
    fm.validate()
    return fm


@lru_cache(maxsize=8)
def _smoothing_matrix(n: int, window: int) -> np.ndarray:
    # moving average with window indices clamped to the profile ends
    k = np.zeros((n, n))
    half = window // 2
    for i in range(n):
        idx = np.clip(np.arange(i - half, i + half + 1), 0, n - 1)
        for j in idx:
            k[i, j] += 1.0 / window
    return k


def _soft_max_stat(xs: np.ndarray, temp: float):
    # temperature-weighted mean emphasizing the profile maximum; returns the
    # statistic over axis 0 and its derivative w.r.t. each profile sample
    shifted = (xs - xs.max(axis=0, keepdims=True)) / temp
    w = np.exp(shifted)
    w /= w.sum(axis=0, keepdims=True)
    stat = np.sum(w * xs, axis=0)
    dstat = w * (1.0 + (xs - stat[None]) / temp)
    return stat, dstat


def _soft_run_stat(xs: np.ndarray, level: float, sharpness: float, dr: float):
    # soft length (mm) of the contiguous above-level run starting at the axis
    s = _sigmoid(sharpness * (xs - level))
    prefix = np.cumprod(s, axis=0)
    stat = dr * prefix.sum(axis=0)
    suffix = np.cumsum(prefix[::-1], axis=0)[::-1]
    dstat = dr * suffix * sharpness * (1.0 - s)
    return stat, dstat


def detect_heuristic(img: PolarImage, modality: str, cfg: DetectorConfig,
                     with_jacobian: bool = False):
    """Differentiable per-(theta, z) feature probabilities from radial profiles.

    Parameters
    ----------
    img : PolarImage
        Polar intensity image, shape (n_r, n_theta, n_z).
    modality : str
        "ivus" adds the guidewire class; "mpr" detects bifurcations and
        calcifications only.
    cfg : DetectorConfig
    with_jacobian : bool
        Also return a vector-Jacobian product closure
        vjp(d_probs) -> d_img mapping upstream gradients on the class
        probabilities back to image intensities. (The bifurcation statistic
        couples theta columns through its per-slice mean, so the chain is not
        column-local.)

    Returns
    -------
    FeatureMap [, callable]
    """
    cfg.validate()
    modality = modality.lower()
    if modality not in ("ivus", "mpr"):
        raise ValueError("modality must be 'ivus' or 'mpr'")
    x = img.data
    n_r = x.shape[0]
    n_theta = x.shape[1]
    smooth = _smoothing_matrix(n_r, cfg.smooth_window)
    xs = np.einsum("ij,jtz->itz", smooth, x)

    classes = IVUS_CLASSES if modality == "ivus" else MPR_CLASSES
    probs = np.empty((len(classes),) + x.shape[1:])

    ig = classes.index("G") if modality == "ivus" else None
    ib = classes.index("B")
    ic = classes.index("C")

    if ig is not None:
        lo, hi = cfg.near_band
        far_start = int(round(n_r * (1.0 - cfg.far_band_frac)))
        stat_g = xs[lo:hi].mean(axis=0) - xs[far_start:].mean(axis=0)
        probs[ig] = _sigmoid(cfg.k_wire * (stat_g - cfg.tau_wire))

    run, drun = _soft_run_stat(xs, cfg.lumen_level, cfg.run_sharpness,
                               img.config.dr)
    stat_b = run - run.mean(axis=0, keepdims=True)
    probs[ib] = _sigmoid(cfg.k_branch * (stat_b - cfg.tau_branch))

    r0 = int(round(cfg.calc_r_min_mm / img.config.dr))
    r0 = min(max(r0, 0), n_r - 2)
    stat_c, dstat_c = _soft_max_stat(xs[r0:], cfg.softmax_temp)
    probs[ic] = _sigmoid(cfg.k_calc * (stat_c - cfg.tau_calc))

    fm = FeatureMap(probs=probs, classes=classes)
    fm.validate()
    if not with_jacobian:
        return fm

    def vjp(d_probs: np.ndarray) -> np.ndarray:
        d_xs = np.zeros_like(xs)
        if ig is not None:
            g = d_probs[ig] * cfg.k_wire * probs[ig] * (1.0 - probs[ig])
            lo, hi = cfg.near_band
            far_start = int(round(n_r * (1.0 - cfg.far_band_frac)))
            d_xs[lo:hi] += g[None] / (hi - lo)
            d_xs[far_start:] -= g[None] / (n_r - far_start)
        # bifurcation: per-slice mean couples theta columns
        gb = d_probs[ib] * cfg.k_branch * probs[ib] * (1.0 - probs[ib])
        d_xs += drun * (gb - gb.mean(axis=0, keepdims=True))[None]
        gc = d_probs[ic] * cfg.k_calc * probs[ic] * (1.0 - probs[ic])
        d_xs[r0:] += dstat_c * gc[None]
        return np.einsum("ji,jtz->itz", smooth, d_xs)

    return fm, vjp


def binarize_guidewire(fm: FeatureMap, threshold: float = 0.5) -> np.ndarray:
    """Binary (theta, z) guidewire mask; True bins are excluded from NMI."""
    return fm.probs[fm.class_index("G")] > threshold


def longitudinal_profile(fm: FeatureMap) -> np.ndarray:
    """Per-class 1D landmark signal: maximum probability over theta."""
    return fm.probs.max(axis=1)


class HeuristicMovingDetector:
    """Differentiable moving-side detector used during optimization."""

    def __init__(self, cfg: DetectorConfig | None = None):
        self.cfg = cfg or DetectorConfig()

    def __call__(self, img: PolarImage, params=None, with_jacobian: bool = False):
        return detect_heuristic(img, "mpr", self.cfg, with_jacobian=with_jacobian)


class OracleMovingDetector:
    """Moving-side oracle: transports ground-truth labels through the warp.

    Piecewise constant in the parameters (nearest-bin transport), so it
    reports a None jacobian; gradient flow in oracle mode comes from the
    intensity term alone.
    """

    def __init__(self, mpr_labels: np.ndarray, label_spacing: float,
                 frame_spacing: float, cfg: DetectorConfig | None = None):
        self.labels = np.asarray(mpr_labels, dtype=np.float64)
        self.label_spacing = label_spacing
        self.frame_spacing = frame_spacing
        self.cfg = cfg or DetectorConfig(kind="oracle")

    def __call__(self, img: PolarImage, params, with_jacobian: bool = False):
        n_frames = img.data.shape[2]
        moved = transport_labels(self.labels, self.label_spacing, params,
                                 n_frames, self.frame_spacing)
        fm = detect_oracle(moved, MPR_CLASSES, self.cfg)
        if with_jacobian:
            return fm, None
        return fm


def transport_labels(labels: np.ndarray, label_spacing: float, params,
                     n_frames: int, frame_spacing: float) -> np.ndarray:
    """Carry (theta, z) labels from the source grid through a warp.

    Nearest-bin transport: frame p reads the label slice at arc
    s_z * p * frame_spacing + t_z and the theta bin rotated by theta_p
    (mirrored first when params.mirror). Out-of-extent frames read background.
    Local in-plane translations do not move presence labels.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n_class, n_theta, n_src = labels.shape
    out = np.zeros((n_class, n_theta, n_frames))
    shifts = np.round(np.asarray(params.theta) * n_theta / (2.0 * np.pi)).astype(int)
    j = np.arange(n_theta)
    for p in range(n_frames):
        arc = params.s_z * (p * frame_spacing) + params.t_z
        zi = int(round(arc / label_spacing))
        if zi < 0 or zi >= n_src:
            continue
        if params.mirror:
            j_src = (-(j + shifts[p])) % n_theta
        else:
            j_src = (j + shifts[p]) % n_theta
        out[:, :, p] = labels[:, j_src, zi]
    return out
