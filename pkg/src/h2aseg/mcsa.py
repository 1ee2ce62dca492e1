"""Cross-modal window attention block: global token interaction, then local detail.

Stage one pools each modality into one token per window (learned strided
convolution), runs bi-directional attention on the token grids, and expands
them back with trilinear interpolation. Stage two partitions the features
into windows and runs bi-directional attention inside each co-located window
pair. Both stages preserve the (B, C, H, W, D) shape of both modalities.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .attention import BdsaPair
from .config import Triple, check_same_shape, check_volume
from .errors import ContractViolation


def _check_divisible(shape: tuple[int, ...], window: Triple, what: str) -> None:
    for axis, (s, w) in enumerate(zip(shape, window)):
        if s % w != 0:
            raise ContractViolation(
                f"{what}: extent {s} on spatial axis {axis} not divisible by window {w}"
            )


def window_partition(x: torch.Tensor, window: Triple) -> torch.Tensor:
    """Split (B, C, H, W, D) into non-overlapping windows.

    Returns (B, N, C, H_win, W_win, D_win) with N = N_h * N_w * N_d and the
    windows ordered lexicographically over (h-block, w-block, d-block).
    Contents are exact crops; no padding.
    """
    check_volume(x, name="window_partition input")
    _check_divisible(tuple(x.shape[2:]), window, "window_partition")
    b, c, h, w, d = x.shape
    hw, ww, dw = window
    nh, nw, nd = h // hw, w // ww, d // dw
    x = x.reshape(b, c, nh, hw, nw, ww, nd, dw)
    x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, nh * nw * nd, c, hw, ww, dw)


def window_reconstruct(windows: torch.Tensor, spatial_shape: Triple) -> torch.Tensor:
    """Exact inverse of window_partition.

    windows: (B, N, C, H_win, W_win, D_win) in partition order; spatial_shape
    is the original (H, W, D).
    """
    if windows.ndim != 6:
        raise ContractViolation(
            f"window_reconstruct: expected 6D windows tensor, got shape {tuple(windows.shape)}"
        )
    b, n, c, hw, ww, dw = windows.shape
    h, w, d = spatial_shape
    _check_divisible((h, w, d), (hw, ww, dw), "window_reconstruct")
    nh, nw, nd = h // hw, w // ww, d // dw
    if n != nh * nw * nd:
        raise ContractViolation(
            f"window_reconstruct: {n} windows inconsistent with grid {nh}x{nw}x{nd} for shape {spatial_shape}"
        )
    x = windows.reshape(b, nh, nw, nd, c, hw, ww, dw)
    x = x.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(b, c, h, w, d)


def window_upsample(tokens: torch.Tensor, spatial_shape: Triple) -> torch.Tensor:
    """Trilinear expansion of a token grid back to feature resolution.

    Corner-aligned convention: output corner voxels coincide with the corner
    token samples. Target extent must be an integer multiple of the token
    grid per axis.
    """
    check_volume(tokens, name="window_upsample tokens")
    for axis, (s, t) in enumerate(zip(spatial_shape, tokens.shape[2:])):
        if s % t != 0:
            raise ContractViolation(
                f"window_upsample: target extent {s} on spatial axis {axis} not a multiple of token extent {t}"
            )
    return F.interpolate(tokens, size=tuple(spatial_shape), mode="trilinear", align_corners=True)


class WindowPool(nn.Module):
    """Learned pooling of each window into one token: conv with kernel = stride = window."""

    def __init__(self, channels: int, window: Triple):
        super().__init__()
        self.window = tuple(window)
        self.conv = nn.Conv3d(channels, channels, kernel_size=self.window, stride=self.window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_volume(x, name="window_pool input")
        _check_divisible(tuple(x.shape[2:]), self.window, "window_pool")
        return self.conv(x)


class McsaBlock(nn.Module):
    """Inter-window then intra-window bi-directional attention at one level.

    With residual=True the trilinear-expanded token features are added to the
    level inputs before the intra-window stage; with residual=False they
    replace them. Inter- and intra-window stages hold separate attention
    parameters.
    """

    def __init__(self, channels: int, window: Triple, residual: bool = True):
        super().__init__()
        self.channels = channels
        self.window = tuple(window)
        self.residual = residual
        self.pool_pet = WindowPool(channels, window)
        self.pool_ct = WindowPool(channels, window)
        self.inter = BdsaPair(channels)
        self.intra = BdsaPair(channels)

    def forward(self, e_pet: torch.Tensor, e_ct: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_volume(e_pet, self.channels, "mcsa PET input")
        check_volume(e_ct, self.channels, "mcsa CT input")
        check_same_shape(e_pet, e_ct, "mcsa modality inputs")
        spatial = tuple(e_pet.shape[2:])

        # Inter-window: one token per window, global interaction, expand back.
        t_pet, t_ct = self.inter(self.pool_pet(e_pet), self.pool_ct(e_ct))
        up_pet = window_upsample(t_pet, spatial)
        up_ct = window_upsample(t_ct, spatial)
        if self.residual:
            hat_pet = e_pet + up_pet
            hat_ct = e_ct + up_ct
        else:
            hat_pet = up_pet
            hat_ct = up_ct

        # Intra-window: attention runs independently inside each co-located
        # window pair; windows are folded into the batch axis.
        w_pet = window_partition(hat_pet, self.window)
        w_ct = window_partition(hat_ct, self.window)
        b, n = w_pet.shape[:2]
        w_pet, w_ct = self.intra(w_pet.reshape(b * n, *w_pet.shape[2:]),
                                 w_ct.reshape(b * n, *w_ct.shape[2:]))
        f_pet = window_reconstruct(w_pet.reshape(b, n, *w_pet.shape[1:]), spatial)
        f_ct = window_reconstruct(w_ct.reshape(b, n, *w_ct.shape[1:]), spatial)
        return f_pet, f_ct
