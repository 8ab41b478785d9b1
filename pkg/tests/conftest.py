import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from curvreg import (PolarConfig, PolarImage, Volume3,
                     resample_centerline, rotation_minimizing_frames)
from curvreg.features import DetectorConfig, detect_heuristic
from curvreg.registration import RegistrationCase, TransformParams
from curvreg.features import HeuristicMovingDetector


def straight_centerline(length_mm=10.0, step=0.1, offset=(0.0, 0.0, 0.0)):
    n = int(round(length_mm / step)) + 1
    pts = np.zeros((n, 3))
    pts[:, 2] = np.arange(n) * step
    pts += np.asarray(offset)
    return rotation_minimizing_frames(pts)


def smooth_volume(seed, shape=(24, 24, 40), spacing=(0.4, 0.4, 0.4),
                  origin=(-4.6, -4.6, 0.0), sigma=2.0):
    rng = np.random.default_rng(seed)
    data = gaussian_filter(rng.normal(0.5, 0.4, size=shape), sigma)
    return Volume3(data=data, spacing=spacing, origin=origin)


def gradcheck_case(seed, n_frames=8, n_r=12, n_theta=12):
    """Small random registration case with healthy gradients everywhere."""
    rng = np.random.default_rng(seed)
    vol = smooth_volume(seed)
    t = np.arange(30) * 0.3
    pts = np.stack([0.5 * np.sin(2 * np.pi * t / 15 + seed),
                    0.4 * np.sin(2 * np.pi * t / 11 + 1), t + 2.0], axis=1)
    c = resample_centerline(rotation_minimizing_frames(pts), 0.3)
    cfgp = PolarConfig(n_r=n_r, dr=0.12, n_theta=n_theta, dz=0.3)
    params = TransformParams(s_z=1.0 + rng.normal(0, 0.03),
                             t_z=0.8 + rng.normal(0, 0.2),
                             theta=rng.normal(0.2, 0.1, n_frames),
                             t_u=rng.normal(0, 0.15, n_frames),
                             t_v=rng.normal(0, 0.15, n_frames))
    fdata = gaussian_filter(rng.normal(0.5, 0.4, size=(n_r, n_theta, n_frames)), 1.0)
    fixed_polar = PolarImage(data=fdata, config=cfgp,
                             z_positions=np.arange(n_frames) * 0.3)
    det = DetectorConfig(tau_calc=0.6, tau_branch=0.8, tau_wire=0.5, k_calc=4.0,
                         k_branch=3.0, k_wire=3.0, lumen_level=0.4,
                         run_sharpness=5.0)
    fixed_fm = detect_heuristic(fixed_polar, "ivus", det)
    mask = np.zeros((n_theta, n_frames), dtype=bool)
    mask[3:5, 2:4] = True
    case = RegistrationCase(fixed_polar=fixed_polar, fixed_fm=fixed_fm,
                            mask=mask, moving_vol=vol, moving_c=c,
                            polar_cfg=cfgp, n_frames=n_frames,
                            frame_spacing=0.3,
                            detector=HeuristicMovingDetector(det))
    return case, params


def fd_param_gradients(case, params, cfg, keys, h=1e-4):
    """Central finite differences of objective components over all params."""
    from curvreg.registration import evaluate_objective

    vec = params.to_vector()
    out = {k: np.zeros_like(vec) for k in keys}
    for i in range(vec.size):
        for sgn in (1.0, -1.0):
            v2 = vec.copy()
            v2[i] += sgn * h
            total, comps = evaluate_objective(
                case, TransformParams.from_vector(v2, mirror=params.mirror),
                cfg, with_grads=False)
            for k in keys:
                val = total.value if k == "total" else comps[k].value
                out[k][i] += sgn * val / (2.0 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
