"""Bi-directional spatial attention between two co-registered feature streams.

The primitive is a directional pass that improves a target stream using a
source stream: six pointwise projections produce two query/key/value triples,
features are flattened to (C, N) tokens over all voxels, two attention terms
are computed, and a 3x3x3 convolution fuses their concatenation back to C
channels. A pair of such passes, one per modality, runs in parallel on the
original inputs.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .config import check_same_shape, check_volume


def attention_weights(q: torch.Tensor, k: torch.Tensor, scale: float) -> torch.Tensor:
    """Row-stochastic attention matrix from flattened queries and keys.

    q, k: (B, C, N). Returns (B, N_q, N_k); softmax runs over the key axis so
    each query row sums to 1. The scale is folded into q, which is far
    smaller than the score matrix.
    """
    scores = torch.matmul((q * scale).transpose(1, 2), k)
    return torch.softmax(scores, dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float) -> torch.Tensor:
    """Convex combinations of value vectors: v @ softmax(q^T k * scale)^T.

    q, k, v: (B, C, N). Output (B, C, N_q): column i is
    sum_j softmax_j(q_i . k_j * scale) v_j.
    """
    w = attention_weights(q, k, scale)
    return torch.matmul(v, w.transpose(1, 2))


class BdsaDirection(nn.Module):
    """One unidirectional attention pass producing an improved target stream.

    k_s and v_s are projected from the source stream; q_s, q_t, k_t and v_t
    are all projected from the target stream. The a_self term therefore
    attends with target-derived queries over source-derived keys/values, and
    the a_cross term attends entirely within the target stream.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.scale = channels ** -0.5
        self.proj_q_s = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj_k_s = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj_v_s = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj_q_t = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj_k_t = nn.Conv3d(channels, channels, kernel_size=1)
        self.proj_v_t = nn.Conv3d(channels, channels, kernel_size=1)
        self.fuse = nn.Conv3d(2 * channels, channels, kernel_size=3, padding=1)

    def attention_terms(self, e_s: torch.Tensor, e_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Both pre-fusion attention outputs, each shaped like the target input."""
        check_volume(e_s, self.channels, "source feature")
        check_volume(e_t, self.channels, "target feature")
        check_same_shape(e_s, e_t, "attention source/target")

        k_s = self.proj_k_s(e_s)
        v_s = self.proj_v_s(e_s)
        q_s = self.proj_q_s(e_t)  # projected from the target stream
        q_t = self.proj_q_t(e_t)
        k_t = self.proj_k_t(e_t)
        v_t = self.proj_v_t(e_t)

        b, c = e_t.shape[:2]
        spatial = e_t.shape[2:]
        flat = lambda t: t.reshape(b, c, -1)  # noqa: E731 - local shape helper

        a_self = attend(flat(q_s), flat(k_s), flat(v_s), self.scale)
        a_cross = attend(flat(q_t), flat(k_t), flat(v_t), self.scale)
        return a_self.reshape(b, c, *spatial), a_cross.reshape(b, c, *spatial)

    def forward(self, e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        a_self, a_cross = self.attention_terms(e_s, e_t)
        return self.fuse(torch.cat([a_self, a_cross], dim=1))


class BdsaPair(nn.Module):
    """Two parallel directional passes, one improving each modality.

    Both passes read the original inputs, so the directions carry no
    sequential dependency and swapping (inputs, parameter sets) swaps outputs.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pet_dir = BdsaDirection(channels)  # target: PET, source: CT
        self.ct_dir = BdsaDirection(channels)   # target: CT, source: PET

    def forward(self, e_pet: torch.Tensor, e_ct: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e_pet_out = self.pet_dir(e_ct, e_pet)
        e_ct_out = self.ct_dir(e_pet, e_ct)
        return e_pet_out, e_ct_out
