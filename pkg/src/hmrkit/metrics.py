"""Evaluation metrics on numpy arrays.

Errors are returned in the units of the inputs; the evaluation report
converts metres to millimetres.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshtopo import pelvis


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def _pair(a, b, what: str):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} must match and be (n, 3)")
    return a, b


def mpjpe(joints_pred, joints_gt) -> float:
    """Mean joint distance after translating the predicted pelvis onto the true one."""
    p, g = _pair(joints_pred, joints_gt, "mpjpe")
    # differences first so identical inputs give exactly zero
    return float(np.linalg.norm((p - g) - (pelvis(p) - pelvis(g)), axis=1).mean())


def mpvpe(verts_pred, verts_gt, pred_root=None, gt_root=None) -> float:
    """Mean vertex distance after root alignment.

    Roots default to the vertex centroids; pass the pelvis of the regressed
    joints to align the same way as :func:`mpjpe`.
    """
    p, g = _pair(verts_pred, verts_gt, "mpvpe")
    pr = p.mean(axis=0) if pred_root is None else np.asarray(pred_root)
    gr = g.mean(axis=0) if gt_root is None else np.asarray(gt_root)
    return float(np.linalg.norm((p - g) - (pr - gr), axis=1).mean())


def procrustes_align(P, G) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity transform taking ``P`` onto ``G``.

    Rotation from the SVD of the centred cross-covariance with the last
    singular direction flipped when needed so that det(R) = +1.
    """
    P, G = _pair(P, G, "procrustes_align")
    if len(P) < 3:
        raise AlignmentError("procrustes needs at least 3 points")
    mp, mg = P.mean(axis=0), G.mean(axis=0)
    X, Y = P - mp, G - mg
    if np.linalg.matrix_rank(Y, tol=1e-12) < 2 or np.linalg.matrix_rank(X, tol=1e-12) < 2:
        raise AlignmentError("degenerate point set for procrustes alignment")
    U, S, Vt = np.linalg.svd(Y.T @ X)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    scale = float(np.trace(np.diag(S) @ D) / np.sum(X * X))
    t = mg - scale * R @ mp
    T = SimilarityTransform(scale, R, t)
    return T, T.apply(P)


def pa_mpjpe(joints_pred, joints_gt) -> float:
    p, g = _pair(joints_pred, joints_gt, "pa_mpjpe")
    _, aligned = procrustes_align(p, g)
    return float(np.linalg.norm(aligned - g, axis=1).mean())


def f_score(pred, gt, threshold: float) -> float:
    """Harmonic mean of nearest-neighbour precision and recall at ``threshold``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("f_score needs non-empty point sets")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    precision = float(np.mean(d.min(axis=1) <= threshold))
    recall = float(np.mean(d.min(axis=0) <= threshold))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ----------------------------------------------------------------- reports

METRIC_COLUMNS = ("sample_id", "mpjpe", "pa_mpjpe", "mpvpe", "f5", "f15")
MM_PER_UNIT = 1000.0


def evaluate_sample(joints_pred, joints_gt, verts_pred, verts_gt) -> dict[str, float]:
    """Per-sample metrics in millimetres.

    MPJPE and MPVPE are pelvis-aligned (mid-hip of the joint sets). F-scores
    compare the Procrustes-aligned dense mesh at 5 mm and 15 mm.
    """
    jp, jg = np.asarray(joints_pred), np.asarray(joints_gt)
    vp, vg = np.asarray(verts_pred), np.asarray(verts_gt)
    _, v_aligned = procrustes_align(vp, vg)
    return {
        "mpjpe": mpjpe(jp, jg) * MM_PER_UNIT,
        "pa_mpjpe": pa_mpjpe(jp, jg) * MM_PER_UNIT,
        "mpvpe": mpvpe(vp, vg, pelvis(jp), pelvis(jg)) * MM_PER_UNIT,
        "f5": f_score(v_aligned * MM_PER_UNIT, vg * MM_PER_UNIT, 5.0),
        "f15": f_score(v_aligned * MM_PER_UNIT, vg * MM_PER_UNIT, 15.0),
    }


def summarize(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_COLUMNS[1:]}


def write_metrics_csv(path: str | Path, rows: list[tuple[str, dict[str, float]]]) -> dict[str, float]:
    """Per-sample rows followed by a ``mean`` summary row; returns the summary."""
    summary = summarize([r for _, r in rows])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for sid, r in rows:
            w.writerow([sid] + [repr(r[k]) for k in METRIC_COLUMNS[1:]])
        w.writerow(["mean"] + [repr(summary[k]) for k in METRIC_COLUMNS[1:]])
    return summary
