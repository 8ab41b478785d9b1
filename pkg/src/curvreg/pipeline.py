"""File-coupled pipeline stages and seeded sweeps.

Stages communicate only through files inside the case directory so any stage
can be re-run in isolation:

    phantom   -> volume.json/.raw, centerline.json, mpr_labels.json/.raw,
                 fixed_polar.json/.raw, gt_params.json, gt_labels.json/.raw,
                 reference_centerline.json
    features  -> fixed_fm.json/.raw, mask.json/.raw
    register  -> params.json, geometry.json, trace.csv, reg_flags.json
    eval      -> report.json (deterministic), timing.json (volatile)
"""

from __future__ import annotations

import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io
from .cases import build_case
from .config import ALL_STAGES, RunConfig, config_to_dict
from .evaluation import batch_report, build_report
from .features import (DetectorConfig, HeuristicMovingDetector,
                       OracleMovingDetector, binarize_guidewire,
                       detect_heuristic, detect_oracle)
from .registration import RegistrationCase, RegistrationResult, register

log = logging.getLogger("curvreg")


def _case_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"case_{seed:04d}"


def _write_error(out_dir: Path, stage: str, exc: Exception) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
    (out_dir / "error.json").write_text(json.dumps(payload, indent=2) + "\n")


def stage_phantom(cfg: RunConfig, seed: int, out: Path):
    bundle = build_case(seed, cfg)
    io.save_volume(out / "volume.json", bundle.volume)
    io.save_centerline(out / "centerline.json", bundle.centerline)
    io.save_labels(out / "mpr_labels.json", bundle.mpr_labels, ("B", "C"),
                   cfg.polar.dz)
    io.save_polar(out / "fixed_polar.json", bundle.fixed_polar)
    io.save_params(out / "gt_params.json", bundle.gt.params)
    io.save_labels(out / "gt_labels.json", bundle.gt.labels, bundle.gt.classes,
                   cfg.polar.dz)
    io.save_centerline(out / "reference_centerline.json",
                       bundle.gt.reference_centerline)
    return bundle


def stage_features(cfg: RunConfig, seed: int, out: Path):
    fixed = io.load_polar(out / "fixed_polar.json")
    det_cfg = DetectorConfig(**{**_det_dict(cfg.detector), "seed": seed})
    if cfg.case_kind in ("identity", "prealign") or det_cfg.kind == "oracle":
        labels, classes, _ = io.load_labels(out / "gt_labels.json")
        fm = detect_oracle(labels, classes, det_cfg)
    else:
        fm = detect_heuristic(fixed, "ivus", det_cfg)
    io.save_feature_map(out / "fixed_fm.json", fm)
    mask = binarize_guidewire(fm, det_cfg.binarize_threshold)
    io.save_labels(out / "mask.json", mask[None].astype(float), ("G",), cfg.polar.dz)
    return fm


def _det_dict(det: DetectorConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(det)


def _load_registration_case(cfg: RunConfig, seed: int, out: Path) -> RegistrationCase:
    fixed = io.load_polar(out / "fixed_polar.json")
    fm = io.load_feature_map(out / "fixed_fm.json")
    mask_arr, _, _ = io.load_labels(out / "mask.json")
    vol = io.load_volume(out / "volume.json")
    c = io.load_centerline(out / "centerline.json")
    det_cfg = DetectorConfig(**{**_det_dict(cfg.detector), "seed": seed})
    if cfg.case_kind in ("identity", "prealign") or det_cfg.kind == "oracle":
        labels, _, spacing = io.load_labels(out / "mpr_labels.json")
        detector = OracleMovingDetector(labels, spacing,
                                        cfg.pullback.frame_spacing, det_cfg)
    else:
        detector = HeuristicMovingDetector(det_cfg)
    return RegistrationCase(fixed_polar=fixed, fixed_fm=fm,
                            mask=mask_arr[0] > 0.5, moving_vol=vol,
                            moving_c=c, polar_cfg=cfg.polar,
                            n_frames=cfg.pullback.n_frames,
                            frame_spacing=cfg.pullback.frame_spacing,
                            detector=detector)


def stage_register(cfg: RunConfig, seed: int, out: Path) -> RegistrationResult:
    case = _load_registration_case(cfg, seed, out)
    result = register(case, cfg.optimizer)
    io.save_params(out / "params.json", result.params)
    io.save_geometry(out / "geometry.json", result.geometry)
    io.save_trace_csv(out / "trace.csv", result.trace)
    flags = {"converged": bool(result.converged),
             "insufficient_landmarks": bool(result.insufficient_landmarks),
             "centerline_failure": bool(result.centerline_failure),
             "iterations": len(result.trace)}
    (out / "reg_flags.json").write_text(json.dumps(flags, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(
        {"runtime_s": result.runtime_s, "finished_at": time.time()}) + "\n")
    return result


def stage_eval(cfg: RunConfig, seed: int, out: Path):
    geometry = io.load_geometry(out / "geometry.json")
    reference = io.load_centerline(out / "reference_centerline.json")
    flags = json.loads((out / "reg_flags.json").read_text())
    timing = json.loads((out / "timing.json").read_text())

    class _Shim:  # minimal result view for build_report
        pass

    shim = _Shim()
    shim.geometry = geometry
    shim.runtime_s = timing.get("runtime_s", 0.0)
    shim.insufficient_landmarks = flags["insufficient_landmarks"]
    shim.centerline_failure = flags["centerline_failure"]
    shim.converged = flags["converged"]
    report = build_report(shim, reference, cfg.eval)
    io.save_report(out / "report.json", report)
    return report


_STAGE_FUNCS = {"phantom": stage_phantom, "features": stage_features,
                "register": stage_register, "eval": stage_eval}


def run_case(cfg: RunConfig, seed: int, stages=None):
    """Run the requested stages for one seed; artifacts land in the case dir."""
    stages = list(stages if stages is not None else cfg.stages)
    out = _case_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    last = None
    for stage in ALL_STAGES:
        if stage not in stages:
            continue
        log.info("case %d: stage %s", seed, stage)
        try:
            last = _STAGE_FUNCS[stage](cfg, seed, out)
        except Exception as exc:
            log.error("case %d failed in %s: %s", seed, stage, exc)
            _write_error(out, stage, exc)
            raise
    return last


def _run_case_worker(args):
    cfg_dict, seed, stages = args
    from .config import config_from_dict
    cfg = config_from_dict(cfg_dict)
    try:
        run_case(cfg, seed, stages)
        return seed, None
    except Exception as exc:
        return seed, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def run_pipeline(cfg: RunConfig, stages=None) -> dict:
    """Execute the configured stages over all seeds, then aggregate.

    Cases may run in parallel up to cfg.jobs; each case is internally
    sequential and fully determined by (config, seed). Returns the summary
    dict (also written to summary.json / summary.csv when eval ran).
    """
    cfg.validate()
    stages = list(stages if stages is not None else cfg.stages)
    seeds = cfg.case_seeds()
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "effective_config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")

    failures = {}
    if cfg.jobs > 1 and len(seeds) > 1:
        payload = [(config_to_dict(cfg), s, stages) for s in seeds]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for seed, err in pool.map(_run_case_worker, payload):
                if err:
                    failures[seed] = err
    else:
        for seed in seeds:
            try:
                run_case(cfg, seed, stages)
            except Exception as exc:
                failures[seed] = f"{type(exc).__name__}: {exc}"

    summary = {"seeds": seeds, "failures": {str(k): v for k, v in failures.items()}}
    if "eval" in stages:
        reports, rows = [], []
        for seed in seeds:
            if seed in failures:
                continue
            report = io.load_report(_case_dir(cfg, seed) / "report.json")
            reports.append(report)
            rows.append({"seed": seed, "f1": report.f1,
                         "precision": report.precision, "recall": report.recall,
                         "cos_u": report.cos_u, "cos_v": report.cos_v,
                         "success": int(report.success),
                         "failure_category": report.failure_category})
        if reports:
            summary.update(batch_report(reports))
            io.save_summary_csv(out_root / "summary.csv", rows,
                                ["seed", "f1", "precision", "recall", "cos_u",
                                 "cos_v", "success", "failure_category"])
        (out_root / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def setup_logging() -> None:
    level = os.environ.get("CURVREG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
