"""Target-aware channel weighting driven by the coarser level's prediction.

The two modality features and the upsampled decoder feature are concatenated,
split into foreground/background pools by the upsampled probability map, and
globally average-pooled into channel intensity vectors. Two small MLPs with a
tanh output turn those intensities into signed channel weights; positive
weights emphasize a channel's contribution, negative weights weaken it.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .config import check_same_shape, check_volume
from .errors import ContractViolation

# Slack for float fuzz in interpolated probabilities before declaring a
# missing-sigmoid contract violation.
_PROB_TOL = 1e-6


def assemble_fused_feature(f_pet: torch.Tensor, f_ct: torch.Tensor, d_up: torch.Tensor) -> torch.Tensor:
    """Channel concatenation in fixed (PET, CT, decoder) order.

    f_pet, f_ct: (B, C, H, W, D); d_up: (B, C_dec, H, W, D). Output has
    2C + C_dec channels.
    """
    check_volume(f_pet, name="fused-feature PET part")
    check_volume(f_ct, name="fused-feature CT part")
    check_volume(d_up, name="fused-feature decoder part")
    check_same_shape(f_pet, f_ct, "fused-feature modality parts")
    if d_up.shape[2:] != f_pet.shape[2:] or d_up.shape[0] != f_pet.shape[0]:
        raise ContractViolation(
            f"fused-feature decoder part: spatial/batch shape {tuple(d_up.shape)} "
            f"does not match modality parts {tuple(f_pet.shape)}"
        )
    return torch.cat([f_pet, f_ct, d_up], dim=1)


def split_fore_back(f: torch.Tensor, p_up: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Voxelwise foreground/background split: (p * f, (1 - p) * f).

    p_up: (B, 1, H, W, D) probabilities in [0, 1]; values outside that range
    signal a missing sigmoid upstream. The two parts sum back to f exactly.
    """
    check_volume(f, name="fused feature")
    check_volume(p_up, 1, "probability map")
    if p_up.shape[2:] != f.shape[2:] or p_up.shape[0] != f.shape[0]:
        raise ContractViolation(
            f"probability map shape {tuple(p_up.shape)} does not match feature {tuple(f.shape)}"
        )
    lo = float(p_up.detach().min())
    hi = float(p_up.detach().max())
    if lo < -_PROB_TOL or hi > 1.0 + _PROB_TOL:
        raise ContractViolation(
            f"probability map outside [0, 1] (min {lo}, max {hi}); missing sigmoid upstream?"
        )
    p = p_up.clamp(0.0, 1.0)
    f_fore = p * f
    return f_fore, f - f_fore


class ChannelMlp(nn.Module):
    """Channel-intensity MLP with one reduced hidden layer; emits pre-tanh scores."""

    def __init__(self, width: int, reduction: int = 4):
        super().__init__()
        hidden = max(width // reduction, 1)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, intensity: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(intensity)))


def channel_weights(f_part: torch.Tensor, mlp: ChannelMlp) -> torch.Tensor:
    """Signed channel weights in (-1, 1): tanh of the MLP over pooled intensities.

    f_part: (B, C, H, W, D). Returns (B, C).
    """
    check_volume(f_part, name="channel-weight input")
    intensity = f_part.mean(dim=(2, 3, 4))
    return torch.tanh(mlp(intensity))


class TamwBlock(nn.Module):
    """Enhancement of the fused feature by foreground/background channel weights.

    Operates at one decoder level: modality features have c_level channels
    each, the upsampled decoder feature 2 * c_next, so the fused feature and
    both weight vectors have width 2 * (c_level + c_next). Foreground and
    background use separate MLPs.
    """

    def __init__(self, c_level: int, c_next: int, reduction: int = 4):
        super().__init__()
        self.c_level = c_level
        self.c_next = c_next
        self.width = 2 * (c_level + c_next)
        self.fore_mlp = ChannelMlp(self.width, reduction)
        self.back_mlp = ChannelMlp(self.width, reduction)

    def enhance(
        self, f_pet: torch.Tensor, f_ct: torch.Tensor, d_up: torch.Tensor, p_up: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Enhanced feature plus the (B, width) weight vectors used."""
        check_volume(f_pet, self.c_level, "tamw PET feature")
        check_volume(d_up, 2 * self.c_next, "tamw decoder feature")
        f = assemble_fused_feature(f_pet, f_ct, d_up)
        f_fore, f_back = split_fore_back(f, p_up)
        w_fore = channel_weights(f_fore, self.fore_mlp)
        w_back = channel_weights(f_back, self.back_mlp)
        broadcast = lambda w: w.reshape(*w.shape, 1, 1, 1)  # noqa: E731
        f_enh = f + broadcast(w_fore) * f_fore + broadcast(w_back) * f_back
        return f_enh, w_fore, w_back

    def forward(
        self, f_pet: torch.Tensor, f_ct: torch.Tensor, d_up: torch.Tensor, p_up: torch.Tensor
    ) -> torch.Tensor:
        f_enh, _, _ = self.enhance(f_pet, f_ct, d_up, p_up)
        return f_enh


def channel_partition(c_level: int, c_next: int) -> tuple[str, ...]:
    """Label each fused-feature channel as pet, ct, or decoder, in concat order."""
    return ("pet",) * c_level + ("ct",) * c_level + ("decoder",) * (2 * c_next)


def emphasis_stats(weights: torch.Tensor, partition: Sequence[str]) -> dict[str, float]:
    """Percentage of each group's channels carrying a positive weight.

    weights: (width,) or (B, width); batches are pooled. Positive weight means
    the channel is emphasized, otherwise weakened. Decoder channels are
    reported alongside the two modalities as a diagnostic.
    """
    w = weights.detach()
    if w.ndim == 1:
        w = w.unsqueeze(0)
    if w.shape[1] != len(partition):
        raise ContractViolation(
            f"partition covers {len(partition)} channels but weights have {w.shape[1]}"
        )
    labels = set(partition)
    if not labels <= {"pet", "ct", "decoder"}:
        raise ContractViolation(f"unknown partition labels: {sorted(labels - {'pet', 'ct', 'decoder'})}")
    stats: dict[str, float] = {}
    for group in ("pet", "ct", "decoder"):
        idx = [i for i, lab in enumerate(partition) if lab == group]
        if not idx:
            continue
        positive = (w[:, idx] > 0).float().mean().item()
        stats[group] = 100.0 * positive
    return stats
