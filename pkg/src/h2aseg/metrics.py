"""Segmentation evaluation: foreground Dice, HD95, precision, recall.

All overlap metrics are percentages. HD95 is the 95th percentile of the
pooled directed boundary-to-boundary distance sets, in millimeters under the
case's voxel spacing, and is undefined whenever either mask is empty.
Aggregation follows the lesion policy: Dice and HD95 are averaged only over
cases whose ground truth contains a lesion; precision is reported for every
case; recall is undefined when the ground truth is empty but the prediction
is not.

Zero-denominator conventions (documented because lesion-free cases exist):
empty prediction scores precision 100 against an empty ground truth and 0
otherwise; both-empty Dice and recall are 100.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .errors import ContractViolation

# Foreground voxels with any six-connected background or out-of-volume
# neighbor form the boundary used by HD95.
_SIX_CONNECTED = generate_binary_structure(3, 1)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict thresholding: voxels exactly at the threshold map to background."""
    prob = np.asarray(prob)
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise ContractViolation("binarize expects probabilities in [0, 1]")
    return prob > threshold


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dice_precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float | None]:
    """(dice%, precision%, recall%) with recall None when undefined.

    Undefined recall occurs only for an empty ground truth against a
    non-empty prediction; such cases are excluded from recall aggregation.
    """
    tp, fp, fn = _counts(pred, gt)
    if 2 * tp + fp + fn == 0:
        dice = 100.0
    else:
        dice = 200.0 * tp / (2 * tp + fp + fn)
    if tp + fp == 0:
        precision = 100.0 if fn == 0 else 0.0
    else:
        precision = 100.0 * tp / (tp + fp)
    recall: float | None
    if tp + fn == 0:
        recall = 100.0 if fp == 0 else None
    else:
        recall = 100.0 * tp / (tp + fn)
    return dice, precision, recall


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a six-connected background or out-of-volume neighbor."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~interior


def _boundary_points(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    coords = np.argwhere(boundary_voxels(mask)).astype(np.float64)
    return coords * np.asarray(spacing, dtype=np.float64)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float]) -> float | None:
    """95th percentile of the pooled directed boundary distance sets, in mm.

    Symmetric by construction; None when either mask is empty.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shape mismatch {pred.shape} vs {gt.shape}")
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ContractViolation(f"voxel spacing must be positive, got {spacing}")
    if not pred.any() or not gt.any():
        return None
    pts_pred = _boundary_points(pred, spacing)
    pts_gt = _boundary_points(gt, spacing)
    d_pred_to_gt = cKDTree(pts_gt).query(pts_pred)[0]
    d_gt_to_pred = cKDTree(pts_pred).query(pts_gt)[0]
    return float(np.percentile(np.concatenate([d_pred_to_gt, d_gt_to_pred]), 95))


@dataclass(frozen=True)
class CaseMetrics:
    """Per-case metric values plus the flags driving aggregation."""

    case_id: str
    dice: float
    hd95: float | None
    precision: float
    recall: float | None
    has_lesion: bool

    @property
    def hd95_defined(self) -> bool:
        return self.hd95 is not None


def evaluate_case(
    prob: np.ndarray,
    gt: np.ndarray,
    spacing: Sequence[float],
    case_id: str = "",
    threshold: float = 0.5,
) -> CaseMetrics:
    """All metrics for one case; the lesion flag drives downstream aggregation."""
    gt = np.asarray(gt, dtype=bool)
    pred = binarize(prob, threshold)
    dice, precision, recall = dice_precision_recall(pred, gt)
    return CaseMetrics(
        case_id=case_id,
        dice=dice,
        hd95=hd95(pred, gt, spacing),
        precision=precision,
        recall=recall,
        has_lesion=bool(gt.any()),
    )


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n: int


def _summarize(values: list[float]) -> MetricSummary:
    if not values:
        return MetricSummary(mean=math.nan, std=math.nan, n=0)
    arr = np.asarray(values, dtype=np.float64)
    return MetricSummary(mean=float(arr.mean()), std=float(arr.std()), n=len(values))


METRIC_ORDER = ("dice", "hd95", "precision", "recall")


def aggregate(cases: Sequence[CaseMetrics]) -> dict[str, MetricSummary]:
    """Mean and population std per metric over the cases where it is included.

    Dice and HD95 only count lesion cases; precision counts every case;
    recall counts the cases where it is defined.
    """
    if not cases:
        raise ContractViolation("aggregate requires at least one case")
    dice = [c.dice for c in cases if c.has_lesion]
    hd = [c.hd95 for c in cases if c.has_lesion and c.hd95 is not None]
    precision = [c.precision for c in cases]
    recall = [c.recall for c in cases if c.recall is not None]
    return {
        "dice": _summarize(dice),
        "hd95": _summarize(hd),
        "precision": _summarize(precision),
        "recall": _summarize(recall),
    }


def average_summaries(summaries: Sequence[dict[str, MetricSummary]]) -> dict[str, float]:
    """Mean of per-run means, one value per metric; mirrors repeated-run reporting."""
    if not summaries:
        raise ContractViolation("average_summaries requires at least one run")
    out: dict[str, float] = {}
    for metric in METRIC_ORDER:
        means = [s[metric].mean for s in summaries if not math.isnan(s[metric].mean)]
        out[metric] = float(np.mean(means)) if means else math.nan
    return out


def write_case_csv(path: str | Path, cases: Sequence[CaseMetrics]) -> None:
    """Per-case CSV; undefined HD95/recall cells are left blank."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "dice", "hd95", "precision", "recall", "has_lesion"])
        for c in cases:
            writer.writerow([
                c.case_id,
                f"{c.dice:.4f}",
                "" if c.hd95 is None else f"{c.hd95:.4f}",
                f"{c.precision:.4f}",
                "" if c.recall is None else f"{c.recall:.4f}",
                int(c.has_lesion),
            ])


def write_summary_csv(path: str | Path, summary: dict[str, MetricSummary]) -> None:
    """One-row summary CSV in Dice, HD95, Precision, Recall order."""
    header: list[str] = []
    row: list[str] = []
    for metric in METRIC_ORDER:
        s = summary[metric]
        header += [f"{metric}_mean", f"{metric}_std", f"{metric}_n"]
        row += [f"{s.mean:.4f}", f"{s.std:.4f}", str(s.n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)
