"""Registration quality metrics against ground truth, and batch aggregation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

FAILURE_CATEGORIES = ("none", "insufficient_landmarks", "centerline_failure",
                      "nonconvergence")


@dataclass
class EvalThresholds:
    distance_mm: float = 2.0
    f1: float = 0.8
    cosine: float = 0.75


@dataclass
class RegistrationReport:
    f1: float
    precision: float
    recall: float
    cos_u: float
    cos_v: float
    success: bool
    failure_category: str
    runtime_s: float = 0.0
    cos_u_frames: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cos_v_frames: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def validate(self) -> None:
        if self.failure_category not in FAILURE_CATEGORIES:
            raise ValueError(f"unknown failure category {self.failure_category}")
        p, r = self.precision, self.recall
        expected = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
        if abs(self.f1 - expected) > 1e-12:
            raise ValueError("f1 must be the harmonic mean of precision and recall")


def centerline_overlap(warped: np.ndarray, reference: np.ndarray,
                       threshold: float = 2.0):
    """Point-overlap precision/recall/F1 under a distance threshold.

    A warped point within ``threshold`` of its nearest reference point is a
    true positive, beyond it a false positive; reference points farther than
    the threshold from every warped point are false negatives. Nearest
    neighbors are unconstrained (many-to-one allowed). Empty denominators
    yield zeros.
    """
    warped = np.asarray(warped, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if warped.size == 0 or reference.size == 0:
        raise ValueError("point sets must be non-empty")

    d_w, _ = cKDTree(reference).query(warped, workers=-1)
    d_r, _ = cKDTree(warped).query(reference, workers=-1)
    tp = int(np.sum(d_w <= threshold))
    fp = warped.shape[0] - tp
    fn = int(np.sum(d_r > threshold))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def plane_cosine(u_warped: np.ndarray, v_warped: np.ndarray,
                 u_reference: np.ndarray, v_reference: np.ndarray):
    """Per-frame cosine similarity of the plane-spanning axes, plus medians."""
    for a, b in ((u_warped, u_reference), (v_warped, v_reference)):
        if np.asarray(a).shape != np.asarray(b).shape:
            raise ValueError("frame counts of warped and reference axes differ")
    cos_u = np.einsum("ij,ij->i", u_warped, u_reference)
    cos_v = np.einsum("ij,ij->i", v_warped, v_reference)
    return {"cos_u": float(np.median(cos_u)), "cos_v": float(np.median(cos_v)),
            "cos_u_frames": cos_u, "cos_v_frames": cos_v}


def build_report(result, reference_centerline, thresholds: EvalThresholds | None = None) -> RegistrationReport:
    """Score one registration result against its ground-truth geometry."""
    thr = thresholds or EvalThresholds()
    precision, recall, f1 = centerline_overlap(
        result.geometry.origins, reference_centerline.points, thr.distance_mm)
    cos = plane_cosine(result.geometry.u_axes, result.geometry.v_axes,
                       reference_centerline.u, reference_centerline.v)
    success = (f1 >= thr.f1 and cos["cos_u"] >= thr.cosine
               and cos["cos_v"] >= thr.cosine)
    if success:
        category = "none"
    elif result.insufficient_landmarks:
        category = "insufficient_landmarks"
    elif result.centerline_failure:
        category = "centerline_failure"
    else:
        category = "nonconvergence"
    report = RegistrationReport(
        f1=f1, precision=precision, recall=recall,
        cos_u=cos["cos_u"], cos_v=cos["cos_v"], success=success,
        failure_category=category, runtime_s=result.runtime_s,
        cos_u_frames=cos["cos_u_frames"], cos_v_frames=cos["cos_v_frames"])
    report.validate()
    return report


def _median_iqr(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    q25, q75 = np.percentile(arr, [25.0, 75.0])  # linear-interpolation quantiles
    return {"median": float(np.median(arr)), "iqr": [float(q25), float(q75)]}


def batch_report(reports) -> dict:
    """Aggregate per-case reports: median/IQR per metric, success rate,
    failure histogram."""
    reports = list(reports)
    if not reports:
        raise ValueError("batch_report needs at least one case")
    agg = {
        "n_cases": len(reports),
        "f1": _median_iqr([r.f1 for r in reports]),
        "precision": _median_iqr([r.precision for r in reports]),
        "recall": _median_iqr([r.recall for r in reports]),
        "cos_u": _median_iqr([r.cos_u for r in reports]),
        "cos_v": _median_iqr([r.cos_v for r in reports]),
        "success_rate": float(np.mean([r.success for r in reports])),
        "failure_categories": dict(Counter(r.failure_category for r in reports)),
    }
    return agg
