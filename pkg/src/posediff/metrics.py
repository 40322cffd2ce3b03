"""Pose-estimation metrics: MPJPE, Procrustes-aligned MPJPE, PCK, AUC.

All functions take (pred, gt) arrays shaped (N, J, 3) in millimeters and are
pure, with deterministic reduction order. Alignment defaults to a similarity
transform (rotation + translation + scale, the community P-MPJPE protocol);
``rigid_only`` restricts it to rotation + translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericsError, ShapeError

__all__ = [
    "mpjpe",
    "procrustes_align",
    "p_mpjpe",
    "pck",
    "auc",
    "MetricReport",
    "compute_report",
]

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = tuple(float(t) for t in range(0, 151, 5))  # 31 points


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"poses must be (N, J, 3), got {pred.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    """Per-(frame, joint) Euclidean distances, shape (N, J)."""
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error over all frames and joints."""
    return float(joint_errors(pred, gt).mean())


def _align_frame(p: np.ndarray, g: np.ndarray, rigid_only: bool) -> np.ndarray:
    """Optimal similarity (or rigid) transform of p onto g, one frame."""
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    var_p = (pc**2).sum()
    if var_p < 1e-12:
        raise NumericsError("degenerate frame: all joints coincide")
    cov = pc.T @ gc  # 3x3 cross-covariance
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        raise NumericsError("degenerate frame: rank-deficient joint configuration")
    flip = np.diag([1.0, 1.0, d])
    rot = vt.T @ flip @ u.T  # det +1: reflections excluded
    scale = 1.0 if rigid_only else (s * np.diag(flip)).sum() / var_p
    return scale * pc @ rot.T + mu_g


def procrustes_align(pred, gt, rigid_only: bool = False) -> np.ndarray:
    """Per-frame least-squares alignment of pred onto gt."""
    pred, gt = _check_pair(pred, gt)
    if pred.shape[1] < 3:
        raise NumericsError("alignment needs at least 3 joints per frame")
    out = np.empty_like(pred)
    for n in range(pred.shape[0]):
        try:
            out[n] = _align_frame(pred[n], gt[n], rigid_only)
        except NumericsError as e:
            raise NumericsError(f"frame {n}: {e}") from e
    return out


def p_mpjpe(pred, gt, rigid_only: bool = False) -> float:
    """MPJPE after per-frame Procrustes alignment."""
    return mpjpe(procrustes_align(pred, gt, rigid_only=rigid_only), gt)


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of (frame, joint) pairs with error within the threshold."""
    if threshold_mm < 0:
        raise ShapeError(f"threshold must be >= 0, got {threshold_mm}")
    err = joint_errors(pred, gt)
    return float((err <= threshold_mm).sum() / err.size * 100.0)


def auc(pred, gt) -> float:
    """Mean PCK over thresholds 0, 5, ..., 150 mm."""
    values = [pck(pred, gt, t) for t in AUC_THRESHOLDS_MM]
    return sum(values) / len(values)


@dataclass
class MetricReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    per_action: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p_mpjpe_mm > self.mpjpe_mm + 1e-9:
            raise NumericsError(
                f"p_mpjpe {self.p_mpjpe_mm} exceeds mpjpe {self.mpjpe_mm}"
            )
        for v in (self.pck_percent, self.auc_percent):
            if not (0.0 <= v <= 100.0):
                raise NumericsError(f"percentage {v} outside [0, 100]")


def compute_report(pairs, rigid_only: bool = False) -> MetricReport:
    """Aggregate metrics over [(action, pred, gt), ...] sequence triples.

    Frame-level metrics average over all frames of all sequences; the
    per-action map averages sequence MPJPE within each action class first.
    """
    all_pred, all_gt = [], []
    by_action: dict = {}
    for action, pred, gt in pairs:
        pred, gt = _check_pair(pred, gt)
        all_pred.append(pred)
        all_gt.append(gt)
        by_action.setdefault(action, []).append(mpjpe(pred, gt))
    if not all_pred:
        raise ShapeError("no sequence pairs to evaluate")
    pred = np.concatenate(all_pred)
    gt = np.concatenate(all_gt)
    return MetricReport(
        mpjpe_mm=mpjpe(pred, gt),
        p_mpjpe_mm=p_mpjpe(pred, gt, rigid_only=rigid_only),
        pck_percent=pck(pred, gt),
        auc_percent=auc(pred, gt),
        per_action={a: float(np.mean(v)) for a, v in sorted(by_action.items())},
    )
