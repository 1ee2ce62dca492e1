"""Dual-branch residual 3D encoder, fused decoder with per-level heads, and model assembly.

The two modality branches share no parameters. Each decoder level emits raw
logits; probabilities are materialized only where needed (channel weighting,
loss, metrics). Decoder level k outputs 2*C^k channels, which pins the fused
feature width 2*(C^k + C^{k+1}) consumed at the next-shallower level.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn
import torch.nn.functional as F

from .config import (
    ModelConfig,
    TrainConfig,
    Triple,
    check_same_shape,
    check_volume,
    effective_window,
    level_shape,
    validate_config,
)
from .errors import ConfigError, ContractViolation
from .mcsa import McsaBlock
from .tamw import TamwBlock, assemble_fused_feature


def _group_norm(channels: int, preferred_groups: int = 8) -> nn.GroupNorm:
    g = min(preferred_groups, channels)
    while g > 1 and channels % g != 0:
        g -= 1
    return nn.GroupNorm(g, channels)


class ResidualBlock3d(nn.Module):
    """Pre-activation residual block: two 3x3x3 convolutions plus a skip projection."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm1 = _group_norm(in_channels)
        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = _group_norm(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv3d(in_channels, out_channels, kernel_size=1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.01))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.01))
        return h + self.skip(x)


class EncoderBranch(nn.Module):
    """Single-modality encoder: level 1 keeps resolution, deeper levels halve it."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = ResidualBlock3d(1, channels[0])
        downs = []
        blocks = []
        for prev, cur in zip(channels[:-1], channels[1:]):
            downs.append(nn.Conv3d(prev, cur, kernel_size=3, stride=2, padding=1))
            blocks.append(ResidualBlock3d(cur, cur))
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_volume(x, 1, "encoder input")
        feats = [self.stem(x)]
        for down, block in zip(self.downs, self.blocks):
            feats.append(block(down(feats[-1])))
        return feats


class DecoderBlock(nn.Module):
    """Residual refinement of the fused feature plus a 1-channel logit head."""

    def __init__(self, in_channels: int, out_channels: int, level: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.level = level
        self.block = ResidualBlock3d(in_channels, out_channels)
        self.head = nn.Conv3d(out_channels, 1, kernel_size=1)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_volume(f, self.in_channels, f"decoder level {self.level} input")
        d = self.block(f)
        return d, self.head(d)


@dataclass(frozen=True)
class PredictionPyramid:
    """Per-level logit maps, shallowest (full resolution) first.

    logits[k-1] is the level-k map at 1/2^(k-1) of the input patch resolution,
    shaped (B, 1, H, W, D) at that scale.
    """

    logits: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if not self.logits:
            raise ContractViolation("prediction pyramid must have at least one level")
        top = self.logits[0]
        for k, p in enumerate(self.logits, start=1):
            check_volume(p, 1, f"pyramid level {k}")
            expected = tuple(s // 2 ** (k - 1) for s in top.shape[2:])
            if tuple(p.shape[2:]) != expected:
                raise ContractViolation(
                    f"pyramid level {k}: expected spatial shape {expected}, got {tuple(p.shape[2:])}"
                )

    @property
    def depth(self) -> int:
        return len(self.logits)

    def __iter__(self):
        return iter(self.logits)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.logits[i]


def _upsample2(x: torch.Tensor, size: Triple) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=True)


class H2ASeg(nn.Module):
    """Full segmentation network for a co-registered (CT, PET) patch pair.

    Cross-modal attention blocks sit between the encoder levels and the
    decoder; channel weighting conditions each decoder level on the coarser
    level's prediction. Either block set can be disabled, degrading to a
    dual encoder with concatenation fusion.
    """

    def __init__(self, cfg: ModelConfig, patch_size: Triple):
        super().__init__()
        report = validate_config(cfg, replace(TrainConfig(), patch_size=tuple(patch_size)))
        if not report.ok:
            raise ConfigError(f"invalid model/patch geometry: {report}")
        self.cfg = cfg
        self.patch_size = tuple(patch_size)
        depth = cfg.depth
        ch = cfg.channels

        self.pet_encoder = EncoderBranch(ch)
        self.ct_encoder = EncoderBranch(ch)

        self.mcsa = nn.ModuleDict()
        for k in range(1, depth + 1):
            if cfg.mcsa_active(k):
                shape = level_shape(self.patch_size, k)
                win = effective_window(cfg.window_size, shape)
                self.mcsa[str(k)] = McsaBlock(ch[k - 1], win, residual=cfg.mcsa_residual)

        self.tamw = nn.ModuleDict()
        if cfg.use_tamw:
            for k in range(1, depth):
                self.tamw[str(k)] = TamwBlock(ch[k - 1], ch[k], cfg.tamw_mlp_reduction)

        self.decoder = nn.ModuleDict()
        for k in range(1, depth + 1):
            if k == depth:
                in_ch = 2 * ch[k - 1]
            else:
                in_ch = 2 * (ch[k - 1] + ch[k])
            self.decoder[str(k)] = DecoderBlock(in_ch, 2 * ch[k - 1], level=k)

    def forward(self, ct: torch.Tensor, pet: torch.Tensor, capture: dict | None = None) -> PredictionPyramid:
        check_volume(ct, 1, "CT input")
        check_volume(pet, 1, "PET input")
        check_same_shape(ct, pet, "CT/PET inputs")
        if tuple(ct.shape[2:]) != self.patch_size:
            raise ContractViolation(
                f"input patch {tuple(ct.shape[2:])} does not match model patch size {self.patch_size}"
            )
        if not (torch.isfinite(ct).all() and torch.isfinite(pet).all()):
            raise ContractViolation("non-finite values in input volumes")

        pet_feats = self.pet_encoder(pet)
        ct_feats = self.ct_encoder(ct)

        fused: list[tuple[torch.Tensor, torch.Tensor]] = []
        for k in range(1, self.cfg.depth + 1):
            e_pet, e_ct = pet_feats[k - 1], ct_feats[k - 1]
            key = str(k)
            if key in self.mcsa:
                f_pet, f_ct = self.mcsa[key](e_pet, e_ct)
            else:
                f_pet, f_ct = e_pet, e_ct
            fused.append((f_pet, f_ct))
            if capture is not None:
                capture.setdefault("modality_features", {})[k] = (f_pet.detach(), f_ct.detach())

        depth = self.cfg.depth
        f_pet, f_ct = fused[depth - 1]
        d, logits = self.decoder[str(depth)](torch.cat([f_pet, f_ct], dim=1))
        pyramid: list[torch.Tensor] = [logits]

        for k in range(depth - 1, 0, -1):
            size = level_shape(self.patch_size, k)
            d_up = _upsample2(d, size)
            p_up = _upsample2(torch.sigmoid(logits), size)
            f_pet, f_ct = fused[k - 1]
            key = str(k)
            if key in self.tamw:
                f, w_fore, w_back = self.tamw[key].enhance(f_pet, f_ct, d_up, p_up)
                if capture is not None:
                    capture.setdefault("tamw_weights", {})[k] = (w_fore.detach(), w_back.detach())
            else:
                f = assemble_fused_feature(f_pet, f_ct, d_up)
            d, logits = self.decoder[key](f)
            pyramid.append(logits)

        pyramid.reverse()
        return PredictionPyramid(tuple(pyramid))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, patch_size: Triple, seed: int | None = None) -> H2ASeg:
    """Construct a model, optionally with fully seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return H2ASeg(cfg, patch_size)
