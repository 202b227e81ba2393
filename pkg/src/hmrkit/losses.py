"""Training objective: vertex, 3D/2D joint and heatmap terms.

All functions accept single samples or batches (leading batch axis) and
average per-sample values over the batch, so the batch mean of per-sample
losses equals the loss of the concatenated batch.
"""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .ndtensor import ConfigurationError, ContractError, DimensionError, Tensor, as_tensor

BCE_CLAMP = 1e-7
DICE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    w_v: float = 0.01
    w_j3d: float = 0.1
    w_j2d: float = 0.01
    w_bce: float = 1.0
    w_dice: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossReport:
    l_v: float
    l_j3d: float
    l_j2d: float
    l_bce: float
    l_dice: float
    total: float

    COLUMNS = ("step", "l_v", "l_j3d", "l_j2d", "l_bce", "l_dice", "total")

    def row(self, step: int) -> list[str]:
        return [str(step)] + [repr(float(v)) for v in astuple(self)]


def _check(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction {a.shape} vs target {b.shape}")


def vertex_loss(pred, gt) -> Tensor:
    """Mean per-vertex L1 distance."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    _check(pred, gt, "vertex_loss")
    return (gt - pred).abs().sum(axis=-1).mean()


def joint_loss(pred, regressed, gt) -> Tensor:
    """Mean over joints of ||gt - pred|| + ||gt - regressed|| (unsquared Euclidean).

    Serves both the 3-D (K, 3) and 2-D (K, 2) joint terms.
    """
    pred, regressed, gt = as_tensor(pred), as_tensor(regressed), as_tensor(gt)
    _check(pred, gt, "joint_loss")
    _check(regressed, gt, "joint_loss")
    return ((gt - pred).norm(axis=-1) + (gt - regressed).norm(axis=-1)).mean()


joint3d_loss = joint_loss
joint2d_loss = joint_loss


def _binary(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ContractError("heatmap target must be binary")


def heatmap_bce(pred, target) -> Tensor:
    """Per-map summed binary cross entropy, averaged over maps (and batch)."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred, target, "heatmap_bce")
    _binary(target.data)
    h = pred.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.data
    ll = h.log() * t + (1.0 - h).log() * (1.0 - t)
    return -ll.sum(axis=(-2, -1)).mean()


def heatmap_dice(pred, target) -> Tensor:
    """Mean over maps of 1 - 2 sum(pred*target) / (sum(target) + sum(pred) + eps)."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred, target, "heatmap_dice")
    if np.any(pred.data < 0) or np.any(target.data < 0):
        raise ContractError("dice inputs must be non-negative")
    inter = (pred * target.data).sum(axis=(-2, -1))
    denom = pred.sum(axis=(-2, -1)) + (target.data.sum(axis=(-2, -1)) + DICE_EPS)
    return (1.0 - 2.0 * inter / denom).mean()


def total_loss(terms: dict[str, Tensor], weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport]:
    """Weighted sum of the five terms keyed ``l_v, l_j3d, l_j2d, l_bce, l_dice``."""
    total = (
        terms["l_v"] * weights.w_v
        + terms["l_j3d"] * weights.w_j3d
        + terms["l_j2d"] * weights.w_j2d
        + terms["l_bce"] * weights.w_bce
        + terms["l_dice"] * weights.w_dice
    )
    report = LossReport(**{k: float(as_tensor(v).data) for k, v in terms.items()}, total=float(total.data))
    return total, report


def compute_losses(output, batch, template, weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport]:
    """Five-term objective for a model output against a stacked ground-truth batch.

    ``batch`` carries arrays ``gt_coarse``, ``gt_dense``, ``gt_joints3d``,
    ``gt_joints2d``, ``gt_heatmaps`` with a leading batch axis.
    """
    from .meshtopo import regress_joints
    from .model import project_2d

    dtype = output.coarse_vertices.dtype
    R = template.R.astype(dtype)
    regressed = regress_joints(R, output.dense_vertices)
    terms = {
        "l_v": vertex_loss(output.coarse_vertices, batch["gt_coarse"]) + vertex_loss(output.dense_vertices, batch["gt_dense"]),
        "l_j3d": joint_loss(output.joints3d, regressed, batch["gt_joints3d"]),
        "l_j2d": joint_loss(
            project_2d(output.joints3d, output.camera), project_2d(regressed, output.camera), batch["gt_joints2d"]
        ),
        "l_bce": heatmap_bce(output.heatmaps, batch["gt_heatmaps"]),
        "l_dice": heatmap_dice(output.heatmaps, batch["gt_heatmaps"]),
    }
    return total_loss(terms, weights)


class LossLog:
    """Appends one CSV row per optimisation step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LossReport.COLUMNS)

    def append(self, step: int, report: LossReport) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(report.row(step))
