"""On-disk formats.

Array-bearing objects use a JSON header next to a raw little-endian float32
sidecar (C order). The header records the array shape, dtype tag "f32le",
and the sidecar filename; everything else (params, reports, centerlines)
is plain JSON. Volume arrays are stored x-major with z varying fastest.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import RegistrationReport
from .features import FeatureMap
from .geometry import Centerline, PolarConfig, PolarImage, Volume3
from .registration import TransformParams, WarpedGeometry


def _write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _write_raw(json_path: Path, array: np.ndarray) -> str:
    raw_name = Path(json_path).with_suffix(".raw").name
    raw_path = Path(json_path).parent / raw_name
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return raw_name


def _read_raw(json_path, header: dict) -> np.ndarray:
    raw_path = Path(json_path).parent / header["raw"]
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype tag {header.get('dtype')}")
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    return data.reshape(header["shape"]).astype(np.float64)


# ---------------------------------------------------------------------------
# Volumes and centerlines
# ---------------------------------------------------------------------------

def save_volume(path, vol: Volume3) -> None:
    path = Path(path)
    raw = _write_raw(path, vol.data)
    _write_json(path, {"dims": list(vol.data.shape),
                       "spacing": vol.spacing.tolist(),
                       "origin": vol.origin.tolist(),
                       "dtype": "f32le", "order": "x-major, z fastest",
                       "shape": list(vol.data.shape), "raw": raw})


def load_volume(path) -> Volume3:
    header = _read_json(path)
    data = _read_raw(path, header)
    vol = Volume3(data=data, spacing=header["spacing"], origin=header["origin"])
    vol.validate()
    return vol


def save_centerline(path, c: Centerline) -> None:
    rows = [{"point": c.points[i].tolist(), "u": c.u[i].tolist(),
             "v": c.v[i].tolist(), "t": c.t[i].tolist(),
             "arc": float(c.arc_length[i])} for i in range(c.n_points)]
    _write_json(path, {"points": rows})


def load_centerline(path) -> Centerline:
    rows = _read_json(path)["points"]
    c = Centerline(points=[r["point"] for r in rows],
                   u=[r["u"] for r in rows], v=[r["v"] for r in rows],
                   t=[r["t"] for r in rows],
                   arc_length=[r["arc"] for r in rows])
    c.validate()
    return c


# ---------------------------------------------------------------------------
# Polar images and feature maps
# ---------------------------------------------------------------------------

def save_polar(path, img: PolarImage) -> None:
    path = Path(path)
    raw = _write_raw(path, img.data)
    cfg = img.config
    _write_json(path, {"shape": list(img.data.shape), "dtype": "f32le",
                       "raw": raw, "n_r": cfg.n_r, "dr": cfg.dr,
                       "n_theta": cfg.n_theta, "dz": cfg.dz,
                       "z_positions": img.z_positions.tolist()})


def load_polar(path) -> PolarImage:
    header = _read_json(path)
    data = _read_raw(path, header)
    cfg = PolarConfig(n_r=header["n_r"], dr=header["dr"],
                      n_theta=header["n_theta"], dz=header["dz"])
    img = PolarImage(data=data, config=cfg, z_positions=header["z_positions"])
    img.validate()
    return img


def save_feature_map(path, fm: FeatureMap) -> None:
    path = Path(path)
    raw = _write_raw(path, fm.probs)
    _write_json(path, {"shape": list(fm.probs.shape), "dtype": "f32le",
                       "raw": raw, "classes": list(fm.classes)})


def load_feature_map(path) -> FeatureMap:
    header = _read_json(path)
    fm = FeatureMap(probs=np.clip(_read_raw(path, header), 0.0, 1.0),
                    classes=tuple(header["classes"]))
    fm.validate()
    return fm


# ---------------------------------------------------------------------------
# Transform parameters, geometry, reports
# ---------------------------------------------------------------------------

def save_params(path, params: TransformParams) -> None:
    _write_json(path, {"s_z": params.s_z, "t_z": params.t_z,
                       "theta": params.theta.tolist(),
                       "t_u": params.t_u.tolist(),
                       "t_v": params.t_v.tolist(),
                       "mirror": bool(params.mirror)})


def load_params(path) -> TransformParams:
    d = _read_json(path)
    return TransformParams(s_z=d["s_z"], t_z=d["t_z"], theta=d["theta"],
                           t_u=d["t_u"], t_v=d["t_v"],
                           mirror=bool(d.get("mirror", False)))


def save_geometry(path, geom: WarpedGeometry) -> None:
    _write_json(path, {"origins": geom.origins.tolist(),
                       "u_axes": geom.u_axes.tolist(),
                       "v_axes": geom.v_axes.tolist(),
                       "arc": geom.arc.tolist(),
                       "arc_raw": geom.arc_raw.tolist(),
                       "oob": geom.oob.astype(int).tolist()})


def load_geometry(path) -> WarpedGeometry:
    d = _read_json(path)
    return WarpedGeometry(origins=np.asarray(d["origins"]),
                          u_axes=np.asarray(d["u_axes"]),
                          v_axes=np.asarray(d["v_axes"]),
                          arc=np.asarray(d["arc"]),
                          arc_raw=np.asarray(d["arc_raw"]),
                          oob=np.asarray(d["oob"], dtype=bool))


def save_report(path, report: RegistrationReport) -> None:
    # deterministic: wall-clock goes to the separate timing file
    _write_json(path, {"f1": report.f1, "precision": report.precision,
                       "recall": report.recall, "cos_u": report.cos_u,
                       "cos_v": report.cos_v, "success": bool(report.success),
                       "failure_category": report.failure_category,
                       "cos_u_frames": report.cos_u_frames.tolist(),
                       "cos_v_frames": report.cos_v_frames.tolist()})


def load_report(path, runtime_s: float = 0.0) -> RegistrationReport:
    d = _read_json(path)
    report = RegistrationReport(
        f1=d["f1"], precision=d["precision"], recall=d["recall"],
        cos_u=d["cos_u"], cos_v=d["cos_v"], success=bool(d["success"]),
        failure_category=d["failure_category"], runtime_s=runtime_s,
        cos_u_frames=np.asarray(d["cos_u_frames"]),
        cos_v_frames=np.asarray(d["cos_v_frames"]))
    report.validate()
    return report


def save_labels(path, labels: np.ndarray, classes, label_spacing: float) -> None:
    path = Path(path)
    raw = _write_raw(path, labels)
    _write_json(path, {"shape": list(np.asarray(labels).shape), "dtype": "f32le",
                       "raw": raw, "classes": list(classes),
                       "label_spacing": label_spacing})


def load_labels(path):
    header = _read_json(path)
    return (_read_raw(path, header), tuple(header["classes"]),
            header["label_spacing"])


def save_trace_csv(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["iter", "total", "dice_ce", "nmi", "reg", "penalty"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in fields})


def save_summary_csv(path, rows, fieldnames) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
