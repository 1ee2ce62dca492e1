"""Deep-supervised training objective: per-level BCE + Dice with depth weights.

Every level's logits are trilinearly upsampled to ground-truth resolution
before the losses; BCE stays in logit space for stability and Dice consumes
the sigmoid of the same upsampled logits. Level k carries weight
depth + 1 - k, i.e. (5, 4, 3, 2, 1) for the standard five-level network,
unnormalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .backbone import PredictionPyramid
from .config import check_same_shape, check_volume
from .errors import ContractViolation

DICE_EPS = 1e-5


def _check_binary(gt: torch.Tensor) -> torch.Tensor:
    gt = gt.float()
    if not torch.logical_or(gt == 0, gt == 1).all():
        raise ContractViolation("ground-truth mask must be binary")
    return gt


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Smooth Dice loss on probabilities, averaged over the batch.

    1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), per sample. The eps term
    makes the both-empty case a perfect score (loss 0).
    """
    check_volume(prob, 1, "dice probabilities")
    check_same_shape(prob, gt, "dice inputs")
    if float(prob.min()) < 0 or float(prob.max()) > 1:
        raise ContractViolation("dice_loss expects probabilities in [0, 1]")
    g = _check_binary(gt)
    b = prob.shape[0]
    p = prob.reshape(b, -1)
    g = g.reshape(b, -1)
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def bce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy computed in logit space."""
    check_volume(logits, 1, "bce logits")
    check_same_shape(logits, gt, "bce inputs")
    return F.binary_cross_entropy_with_logits(logits, _check_binary(gt))


def deep_supervision_weights(depth: int) -> tuple[float, ...]:
    """Level weights depth+1-k for k = 1..depth; (5, 4, 3, 2, 1) at depth 5."""
    return tuple(float(depth + 1 - k) for k in range(1, depth + 1))


@dataclass(frozen=True)
class LossReport:
    """Per-level components and the weighted total, kept as 0-dim tensors.

    total == sum_k weights[k] * (bce[k] + dice[k]) by construction and is
    differentiable; use .item() on any field for logging.
    """

    bce: tuple[torch.Tensor, ...]
    dice: tuple[torch.Tensor, ...]
    weights: tuple[float, ...]
    total: torch.Tensor
    eps: float = DICE_EPS

    @property
    def depth(self) -> int:
        return len(self.bce)


def total_loss(
    pyramid: PredictionPyramid,
    gt: torch.Tensor,
    weights: Sequence[float] | None = None,
    eps: float = DICE_EPS,
    expected_depth: int | None = None,
) -> LossReport:
    """Weighted sum over levels of (BCE + Dice) against a full-resolution mask."""
    if expected_depth is not None and pyramid.depth != expected_depth:
        raise ContractViolation(
            f"prediction pyramid has {pyramid.depth} levels, config expects {expected_depth}"
        )
    check_volume(gt, 1, "ground truth")
    if tuple(gt.shape[2:]) != tuple(pyramid[0].shape[2:]):
        raise ContractViolation(
            f"ground truth resolution {tuple(gt.shape[2:])} does not match "
            f"full-resolution prediction {tuple(pyramid[0].shape[2:])}"
        )
    if weights is None:
        weights = deep_supervision_weights(pyramid.depth)
    else:
        weights = tuple(float(w) for w in weights)
        if len(weights) != pyramid.depth:
            raise ContractViolation(
                f"{len(weights)} level weights for a {pyramid.depth}-level pyramid"
            )

    bces = []
    dices = []
    for logits in pyramid:
        if logits.shape[2:] != gt.shape[2:]:
            logits = F.interpolate(logits, size=gt.shape[2:], mode="trilinear", align_corners=True)
        bces.append(bce_loss(logits, gt))
        dices.append(dice_loss(torch.sigmoid(logits), gt, eps=eps))
    total = sum(w * (b + d) for w, b, d in zip(weights, bces, dices))
    return LossReport(bce=tuple(bces), dice=tuple(dices), weights=tuple(weights), total=total, eps=eps)
