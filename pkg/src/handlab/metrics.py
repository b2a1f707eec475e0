"""Evaluation metrics: PCK/AUC, Procrustes mesh error, F-score, sparsification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DegenerateGeometryError

DEFAULT_PCK_THRESHOLDS_MM = np.linspace(0.0, 50.0, 100)


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass
class EvalReport:
    pck_thresholds_mm: np.ndarray
    pck: np.ndarray
    auc: float
    mesh_error_cm: float
    fscore_5mm: float
    fscore_15mm: float
    sparsification_fractions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sparsification_scored: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sparsification_oracle: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "pck_thresholds_mm": self.pck_thresholds_mm.tolist(),
            "pck": self.pck.tolist(),
            "auc": self.auc,
            "mesh_error_cm": self.mesh_error_cm,
            "fscore_5mm": self.fscore_5mm,
            "fscore_15mm": self.fscore_15mm,
            "sparsification_fractions": self.sparsification_fractions.tolist(),
            "sparsification_scored": self.sparsification_scored.tolist(),
            "sparsification_oracle": self.sparsification_oracle.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def pck_auc(
    pred: np.ndarray, gt: np.ndarray, thresholds_mm=DEFAULT_PCK_THRESHOLDS_MM
) -> tuple[np.ndarray, float]:
    """Fraction of keypoints within each threshold, and trapezoidal AUC.

    pred/gt are (n, K, 3) in meters; thresholds in millimeters. The AUC is
    normalized by the threshold range so it lies in [0,1].
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    thresholds = np.asarray(thresholds_mm, dtype=np.float64)
    errors_mm = np.linalg.norm(pred - gt, axis=-1).ravel() * 1000.0
    curve = np.array([(errors_mm < t).mean() for t in thresholds])
    span = thresholds[-1] - thresholds[0]
    auc = float(np.trapezoid(curve, thresholds) / span) if span > 0 else float(curve.mean())
    return curve, auc


def procrustes_align(src: np.ndarray, dst: np.ndarray) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity (rotation, translation, uniform scale).

    Closed form via the centered cross-covariance SVD with a reflection
    guard, so the returned rotation has determinant +1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or src.shape[0] < 3:
        raise ValueError("point sets must both be (m,3) with m >= 3")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    var_s = (xs**2).sum() / src.shape[0]
    if var_s < 1e-18 or d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("point configuration is rank deficient")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    scale = float((d * s.diagonal()).sum() / var_s)
    translation = mu_d - scale * rotation @ mu_s
    transform = SimilarityTransform(scale=scale, rotation=rotation, translation=translation)
    return transform, transform.apply(src)


def mesh_error(pred_verts: np.ndarray, gt_verts: np.ndarray, align: bool = True) -> float:
    """Mean distance between corresponding vertices, reported in cm."""
    pred_verts = np.asarray(pred_verts, dtype=np.float64)
    gt_verts = np.asarray(gt_verts, dtype=np.float64)
    if pred_verts.shape != gt_verts.shape:
        raise ValueError("vertex arrays must have equal shape")
    if align:
        _, pred_verts = procrustes_align(pred_verts, gt_verts)
    return float(np.linalg.norm(pred_verts - gt_verts, axis=1).mean() * 100.0)


def fscore(pred_points: np.ndarray, gt_points: np.ndarray, threshold_mm: float) -> float:
    """Harmonic mean of precision and recall under nearest-neighbor distance."""
    pred_points = np.asarray(pred_points, dtype=np.float64)
    gt_points = np.asarray(gt_points, dtype=np.float64)
    d_mm = np.linalg.norm(pred_points[:, None, :] - gt_points[None, :, :], axis=2) * 1000.0
    precision = (d_mm.min(axis=1) < threshold_mm).mean()
    recall = (d_mm.min(axis=0) < threshold_mm).mean()
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def sparsification(
    errors: np.ndarray, scores: np.ndarray, steps: int = 10
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Remaining mean error after removing the least-confident fraction.

    Returns (fractions, score_ranked, oracle_ranked); the oracle removes
    the highest-error samples instead and lower-bounds the scored curve.
    """
    errors = np.asarray(errors, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if errors.shape != scores.shape or errors.ndim != 1 or errors.size == 0:
        raise ValueError("errors and scores must be equal-length 1D arrays")
    n = errors.size
    by_score = np.argsort(scores, kind="stable")  # ascending: least confident first
    by_error = np.argsort(-errors, kind="stable")  # descending: worst first
    fractions = np.arange(steps) / steps
    scored_curve = np.empty(steps)
    oracle_curve = np.empty(steps)
    for i, frac in enumerate(fractions):
        drop = int(round(frac * n))
        drop = min(drop, n - 1)
        scored_curve[i] = errors[by_score[drop:]].mean()
        oracle_curve[i] = errors[by_error[drop:]].mean()
    return fractions, scored_curve, oracle_curve


def evaluate(
    pred_keypoints: np.ndarray,
    gt_keypoints: np.ndarray,
    pred_verts: np.ndarray | None = None,
    gt_verts: np.ndarray | None = None,
    scores: np.ndarray | None = None,
    thresholds_mm=DEFAULT_PCK_THRESHOLDS_MM,
) -> EvalReport:
    """Full report over a batch of samples."""
    curve, auc = pck_auc(pred_keypoints, gt_keypoints, thresholds_mm)
    me = 0.0
    f5 = f15 = 0.0
    if pred_verts is not None and gt_verts is not None:
        per_sample = []
        f5s, f15s = [], []
        for p, g in zip(pred_verts, gt_verts):
            _, aligned = procrustes_align(p, g)
            per_sample.append(np.linalg.norm(aligned - g, axis=1).mean() * 100.0)
            f5s.append(fscore(aligned, g, 5.0))
            f15s.append(fscore(aligned, g, 15.0))
        me = float(np.mean(per_sample))
        f5 = float(np.mean(f5s))
        f15 = float(np.mean(f15s))
    report = EvalReport(
        pck_thresholds_mm=np.asarray(thresholds_mm, dtype=np.float64),
        pck=curve,
        auc=auc,
        mesh_error_cm=me,
        fscore_5mm=f5,
        fscore_15mm=f15,
    )
    if scores is not None:
        errors = np.linalg.norm(pred_keypoints - gt_keypoints, axis=-1).mean(axis=-1)
        frac, scored, oracle = sparsification(errors, np.asarray(scores))
        report.sparsification_fractions = frac
        report.sparsification_scored = scored
        report.sparsification_oracle = oracle
    return report
