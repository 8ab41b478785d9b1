"""Command-line interface.

Subcommands: phantom, features, register, eval, report, sweep. Shared flags:
--config (RunConfig JSON), --seed, --stages, --jobs, --out. The CURVREG_LOG
environment variable sets the log level. Errors exit nonzero after writing a
machine-readable error.json next to the affected artifacts.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import sys
from pathlib import Path

from . import io, pipeline
from .config import RunConfig, load_config, save_config
from .errors import CurvRegError
from .evaluation import EvalThresholds, batch_report, build_report
from .features import DetectorConfig, detect_heuristic


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.seeds = None
    if getattr(args, "seeds", None):
        lo, _, hi = args.seeds.partition(":")
        cfg.seeds = list(range(int(lo), int(hi))) if hi else [int(v) for v in lo.split(",")]
    if getattr(args, "stages", None):
        cfg.stages = args.stages.split(",")
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    cfg.validate()
    return cfg


def _cmd_phantom(args) -> int:
    cfg = _load_cfg(args)
    if args.spec:
        cfg = load_config(args.spec)
        if args.out:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
    pipeline.run_pipeline(cfg, stages=["phantom"])
    return 0


def _cmd_features(args) -> int:
    img = io.load_polar(args.infile)
    det = DetectorConfig()
    if args.config:
        det = load_config(args.config).detector
    fm = detect_heuristic(img, args.modality, det)
    io.save_feature_map(args.out, fm)
    return 0


def _cmd_register(args) -> int:
    cfg = _load_cfg(args)
    fixed_dir = Path(args.fixed)
    moving_dir = Path(args.moving) if args.moving else fixed_dir
    out = Path(args.out) if args.out else fixed_dir
    out.mkdir(parents=True, exist_ok=True)

    from .features import HeuristicMovingDetector, OracleMovingDetector
    from .registration import RegistrationCase, register

    fixed = io.load_polar(fixed_dir / "fixed_polar.json")
    fm = io.load_feature_map(fixed_dir / "fixed_fm.json")
    mask_arr, _, _ = io.load_labels(fixed_dir / "mask.json")
    vol = io.load_volume(moving_dir / "volume.json")
    c = io.load_centerline(moving_dir / "centerline.json")
    if cfg.detector.kind == "oracle":
        labels, _, spacing = io.load_labels(moving_dir / "mpr_labels.json")
        detector = OracleMovingDetector(labels, spacing,
                                        cfg.pullback.frame_spacing, cfg.detector)
    else:
        detector = HeuristicMovingDetector(cfg.detector)
    case = RegistrationCase(fixed_polar=fixed, fixed_fm=fm,
                            mask=mask_arr[0] > 0.5, moving_vol=vol, moving_c=c,
                            polar_cfg=cfg.polar, n_frames=cfg.pullback.n_frames,
                            frame_spacing=cfg.pullback.frame_spacing,
                            detector=detector)
    result = register(case, cfg.optimizer)
    io.save_params(out / "params.json", result.params)
    io.save_geometry(out / "geometry.json", result.geometry)
    io.save_trace_csv(out / "trace.csv", result.trace)
    (out / "reg_flags.json").write_text(json.dumps(
        {"converged": result.converged,
         "insufficient_landmarks": result.insufficient_landmarks,
         "centerline_failure": result.centerline_failure,
         "iterations": len(result.trace)}, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"runtime_s": result.runtime_s}) + "\n")
    return 0


def _cmd_eval(args) -> int:
    result_dir = Path(args.result)
    geometry = io.load_geometry(result_dir / "geometry.json")
    reference = io.load_centerline(args.gt)
    flags = json.loads((result_dir / "reg_flags.json").read_text())
    timing_path = result_dir / "timing.json"
    runtime = json.loads(timing_path.read_text()).get("runtime_s", 0.0) \
        if timing_path.exists() else 0.0

    class _Shim:
        pass

    shim = _Shim()
    shim.geometry = geometry
    shim.runtime_s = runtime
    shim.insufficient_landmarks = flags["insufficient_landmarks"]
    shim.centerline_failure = flags["centerline_failure"]
    shim.converged = flags["converged"]
    thresholds = EvalThresholds()
    if args.config:
        thresholds = load_config(args.config).eval
    report = build_report(shim, reference, thresholds)
    io.save_report(args.out, report)
    return 0


def _cmd_report(args) -> int:
    paths = sorted(globmod.glob(args.glob))
    if not paths:
        print(f"no reports match {args.glob}", file=sys.stderr)
        return 1
    reports, rows = [], []
    for path in paths:
        report = io.load_report(path)
        reports.append(report)
        rows.append({"path": path, "f1": report.f1, "precision": report.precision,
                     "recall": report.recall, "cos_u": report.cos_u,
                     "cos_v": report.cos_v, "success": int(report.success),
                     "failure_category": report.failure_category})
    io.save_summary_csv(args.out, rows,
                        ["path", "f1", "precision", "recall", "cos_u", "cos_v",
                         "success", "failure_category"])
    print(json.dumps(batch_report(reports), indent=2, sort_keys=True))
    if args.plot:
        _plot_traces(paths, Path(args.plot))
    return 0


def _plot_traces(report_paths, out_dir: Path) -> None:
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    for path in report_paths:
        trace_path = Path(path).parent / "trace.csv"
        if not trace_path.exists():
            continue
        with trace_path.open() as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        its = [int(r["iter"]) for r in rows]
        for key in ("total", "dice_ce", "nmi", "reg"):
            ax.plot(its, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / (Path(path).parent.name + "_trace.png"), dpi=110)
        plt.close(fig)


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    summary = pipeline.run_pipeline(cfg)
    print(json.dumps({k: v for k, v in summary.items() if k != "seeds"},
                     indent=2, sort_keys=True))
    return 1 if summary.get("failures") else 0


def _cmd_init_config(args) -> int:
    save_config(args.out, RunConfig())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvreg",
                                     description="Centerline-guided volume-to-pullback registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_default=None):
        p.add_argument("--config", default=None, help="RunConfig JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", default=None, help="'lo:hi' range or comma list")
        p.add_argument("--stages", default=None, help="comma-separated stage subset")
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("phantom", help="synthesize a phantom case (volume, centerline, pullback, ground truth)")
    p.add_argument("--spec", default=None, help="RunConfig JSON carrying the phantom settings")
    add_common(p)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("features", help="detect features on a polar image file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--modality", choices=("ivus", "mpr"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("register", help="register a moving volume to a fixed pullback")
    p.add_argument("--fixed", required=True, help="directory with fixed_polar/fixed_fm/mask")
    p.add_argument("--moving", default=None, help="directory with volume/centerline (default: fixed dir)")
    add_common(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("eval", help="score a registration result against ground truth")
    p.add_argument("--result", required=True, help="directory with geometry.json and reg_flags.json")
    p.add_argument("--gt", required=True, help="reference centerline JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="aggregate case reports into a summary CSV")
    p.add_argument("--glob", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None, help="directory for loss-trace PNGs")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("sweep", help="run the staged pipeline over seeds")
    add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("init-config", help="write a default RunConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init_config)
    return parser


def main(argv=None) -> int:
    pipeline.setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CurvRegError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
