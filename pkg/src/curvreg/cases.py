"""Seeded synthetic cases: phantom + pullback + registration bundle.

Three kinds:

* "identity"  — fixed image synthesized with the identity warp, clean
  modality (no speckle, no guidewire, identity intensity map), oracle
  features on both sides; the self-registration setting.
* "prealign"  — noise-free oracle features with a grid-aligned ground-truth
  shift and uniform rotation; exercises exact pre-alignment recovery.
* "recovery"  — randomized rotation bias, longitudinal shift and smooth
  per-frame jitter with speckle and guidewire on, heuristic detectors on
  both sides; the main warp-recovery setting.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import CaseGenConfig, RunConfig
from .features import (DetectorConfig, FeatureMap, HeuristicMovingDetector,
                       OracleMovingDetector, binarize_guidewire,
                       detect_heuristic, detect_oracle)
from .geometry import Centerline, PolarConfig, PolarImage, Volume3
from .phantom import (BranchSpec, CalcSpec, GroundTruth, PhantomSpec,
                      PullbackConfig, generate_phantom, simulate_pullback)
from .registration import RegistrationCase, TransformParams


@dataclass
class SyntheticCase:
    seed: int
    spec: PhantomSpec
    volume: Volume3
    centerline: Centerline
    mpr_labels: np.ndarray
    pullback_cfg: PullbackConfig
    gt: GroundTruth
    fixed_polar: PolarImage
    fixed_fm: FeatureMap
    case: RegistrationCase


def _spread_positions(rng, n, lo, hi, min_gap):
    for _ in range(200):
        pos = np.sort(rng.uniform(lo, hi, size=n))
        if n < 2 or np.all(np.diff(pos) >= min_gap):
            return pos
    return np.linspace(lo, hi, n)


def make_phantom_spec(seed: int, gen: CaseGenConfig) -> PhantomSpec:
    rng = np.random.default_rng(seed)
    n_b = int(rng.integers(gen.n_branches_range[0], gen.n_branches_range[1] + 1))
    n_c = int(rng.integers(gen.n_calcs_range[0], gen.n_calcs_range[1] + 1))
    length = gen.length_mm
    pos = _spread_positions(rng, n_b + n_c, 4.0, length - 4.0, 3.5)
    order = rng.permutation(n_b + n_c)
    branches = [BranchSpec(position_mm=float(pos[i]),
                           angle_rad=float(rng.uniform(0, 2 * np.pi)),
                           elevation_rad=float(rng.uniform(0.45, 0.8)),
                           radius_mm=float(rng.uniform(0.85, 1.05)),
                           length_mm=float(rng.uniform(4.5, 6.0)))
                for i in order[:n_b]]
    calcs = [CalcSpec(position_mm=float(pos[i]),
                      extent_mm=float(rng.uniform(2.0, 3.0)),
                      angle_rad=float(rng.uniform(0, 2 * np.pi)),
                      width_rad=float(rng.uniform(np.pi / 8, np.pi / 4)),
                      boost=float(rng.uniform(1.1, 1.4)))
             for i in order[n_b:]]
    return PhantomSpec(centerline_kind="spline", length_mm=length,
                       amplitude_mm=float(rng.uniform(*gen.amplitude_range)),
                       lumen_radius_mm=float(rng.uniform(1.4, 1.7)),
                       lumen_taper=float(rng.uniform(0.05, 0.2)),
                       branches=branches, calcs=calcs,
                       noise_sigma=gen.noise_sigma, seed=seed)


def _smooth_jitter(rng, n, amplitude):
    raw = rng.normal(0.0, 1.0, size=n)
    kernel = np.ones(9) / 9.0
    padded = np.pad(raw, 9, mode="reflect")
    smooth = np.convolve(padded, kernel, mode="same")[9:-9]
    peak = np.max(np.abs(smooth))
    if peak == 0.0:
        return np.zeros(n)
    return smooth * (amplitude / peak) * rng.uniform(0.4, 1.0)


def make_gt_params(seed: int, kind: str, n_frames: int, frame_spacing: float,
                   length_mm: float, polar: PolarConfig,
                   gen: CaseGenConfig) -> TransformParams:
    rng = np.random.default_rng(seed + 9001)
    zeros = np.zeros(n_frames)
    if kind == "identity":
        return TransformParams.identity(n_frames)

    pullback = (n_frames - 1) * frame_spacing
    margin = length_mm - pullback
    if margin <= 2.0:
        raise ValueError("centerline leaves no room for a longitudinal shift")
    center = round((margin / 2.0) / polar.dz) * polar.dz
    span = min(gen.t_z_span, margin / 2.0 - 1.0)

    if kind == "prealign":
        k = int(rng.integers(-int(span / polar.dz), int(span / polar.dz) + 1))
        t_z = center + k * polar.dz
        j = int(rng.integers(0, polar.n_theta))
        theta0 = 2.0 * np.pi * j / polar.n_theta
        theta0 = theta0 if theta0 <= np.pi else theta0 - 2.0 * np.pi
        return TransformParams(s_z=1.0, t_z=float(t_z),
                               theta=np.full(n_frames, theta0), t_u=zeros.copy(),
                               t_v=zeros.copy())

    t_z = center + rng.uniform(-span, span)
    theta0 = rng.uniform(-gen.theta_bias_max, gen.theta_bias_max)
    return TransformParams(
        s_z=1.0, t_z=float(t_z), theta=np.full(n_frames, theta0),
        t_u=_smooth_jitter(rng, n_frames, gen.jitter_mm),
        t_v=_smooth_jitter(rng, n_frames, gen.jitter_mm))


def build_case(seed: int, cfg: RunConfig) -> SyntheticCase:
    """Deterministically build one synthetic registration case."""
    kind = cfg.case_kind
    polar = cfg.polar
    gen = cfg.gen
    spec = make_phantom_spec(seed, gen)
    if kind in ("identity", "prealign"):
        spec = replace(spec, noise_sigma=0.0)
    vol, c, mpr_labels = generate_phantom(spec, polar)

    pcfg = replace(cfg.pullback, seed=seed)
    if kind in ("identity", "prealign"):
        pcfg = replace(pcfg, speckle_sigma=0.0, guidewire=False, gamma=1.0)

    gt_params = make_gt_params(seed, kind, pcfg.n_frames, pcfg.frame_spacing,
                               spec.length_mm, polar, gen)
    fixed, gt = simulate_pullback(vol, c, gt_params, pcfg, polar, mpr_labels)

    det_cfg = replace(cfg.detector, seed=seed)
    if kind in ("identity", "prealign") or det_cfg.kind == "oracle":
        fixed_fm = detect_oracle(gt.labels, gt.classes, det_cfg)
        detector = OracleMovingDetector(mpr_labels, polar.dz,
                                        pcfg.frame_spacing, det_cfg)
    else:
        fixed_fm = detect_heuristic(fixed, "ivus", det_cfg)
        detector = HeuristicMovingDetector(det_cfg)

    mask = binarize_guidewire(fixed_fm, det_cfg.binarize_threshold)
    case = RegistrationCase(fixed_polar=fixed, fixed_fm=fixed_fm, mask=mask,
                            moving_vol=vol, moving_c=c, polar_cfg=polar,
                            n_frames=pcfg.n_frames,
                            frame_spacing=pcfg.frame_spacing,
                            detector=detector)
    return SyntheticCase(seed=seed, spec=spec, volume=vol, centerline=c,
                         mpr_labels=mpr_labels, pullback_cfg=pcfg, gt=gt,
                         fixed_polar=fixed, fixed_fm=fixed_fm, case=case)


def reversed_variant(bundle: SyntheticCase, det_cfg: DetectorConfig | None = None) -> RegistrationCase:
    """Same case with the moving centerline traversed end-to-start.

    The moving detector switches to the heuristic (the oracle transport is
    indexed by the original orientation and never looks at the image, so it
    cannot express a reversal).
    """
    rev = bundle.centerline.reversed()
    return replace(bundle.case, moving_c=rev,
                   detector=HeuristicMovingDetector(det_cfg or DetectorConfig()))
