"""Architecture and training hyperparameters, validation, and the tensor layout contract.

Every volumetric tensor exchanged between modules uses the fixed axis order
(batch, channel, H, W, D). Configs are plain immutable dataclasses; validation
is a pure function returning a report rather than raising, so callers can show
all violations at once.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from .errors import ConfigError, ContractViolation

Triple = tuple[int, int, int]

SEED_ENV_VAR = "H2ASEG_SEED"


@dataclass(frozen=True)
class TensorLayout:
    """Fixed axis convention for all volumetric tensors."""

    order: tuple[str, ...] = ("batch", "channel", "height", "width", "depth")

    @property
    def ndim(self) -> int:
        return len(self.order)


TENSOR_LAYOUT = TensorLayout()


def check_volume(t: torch.Tensor, channels: int | None = None, name: str = "tensor") -> torch.Tensor:
    """Assert that ``t`` follows the (B, C, H, W, D) layout contract.

    Raises ContractViolation at the call site instead of letting a malformed
    tensor propagate into shape errors deeper in the stack.
    """
    if t.ndim != TENSOR_LAYOUT.ndim:
        raise ContractViolation(
            f"{name}: expected {TENSOR_LAYOUT.ndim}D (batch, channel, H, W, D) tensor, got {t.ndim}D shape {tuple(t.shape)}"
        )
    if channels is not None and t.shape[1] != channels:
        raise ContractViolation(f"{name}: expected {channels} channels, got {t.shape[1]}")
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters.

    channels holds the per-modality channel count for each encoder level;
    window_size applies to every level, clamped to the level's spatial extent
    where it would not fit. mcsa_levels restricts cross-modal attention to a
    subset of levels (1-based); None means all levels.
    """

    depth: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    window_size: Triple = (8, 8, 4)
    use_mcsa: bool = True
    use_tamw: bool = True
    mcsa_residual: bool = True
    tamw_mlp_reduction: int = 4
    mcsa_levels: tuple[int, ...] | None = None

    def mcsa_active(self, level: int) -> bool:
        """Whether the cross-modal attention block runs at a (1-based) level."""
        if not self.use_mcsa:
            return False
        return self.mcsa_levels is None or level in self.mcsa_levels


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and the reproducibility seed."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 2
    max_epochs: int = 200
    patch_size: Triple = (128, 128, 64)
    seed: int = 0
    optimizer: str = "adam"


@dataclass
class ValidationReport:
    """Outcome of validate_config: violations plus informational notes."""

    errors: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        if self.ok:
            body = "ok"
        else:
            body = "; ".join(self.errors)
        if self.notes:
            body += " | notes: " + "; ".join(self.notes)
        return body


def level_shape(patch_size: Sequence[int], level: int) -> Triple:
    """Spatial extent of features at a (1-based) level: patch halved level-1 times."""
    f = 2 ** (level - 1)
    return tuple(s // f for s in patch_size)  # type: ignore[return-value]


def effective_window(window_size: Sequence[int], shape: Sequence[int]) -> Triple:
    """Componentwise min of the configured window and the level's extent."""
    return tuple(min(w, s) for w, s in zip(window_size, shape))  # type: ignore[return-value]


_AXES = ("H", "W", "D")


def validate_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ValidationReport:
    """Check cross-field invariants of a (model, train) config pair.

    Pure and deterministic; never raises. Window sizes that exceed a level's
    extent are not errors: they are reported as notes with the clamped
    effective window actually used.
    """
    rep = ValidationReport()

    if model_cfg.depth < 2:
        rep.errors.append(f"depth must be >= 2, got {model_cfg.depth}")
    if len(model_cfg.channels) != model_cfg.depth:
        rep.errors.append(
            f"channels has {len(model_cfg.channels)} entries, expected depth={model_cfg.depth}"
        )
    for k, c in enumerate(model_cfg.channels, start=1):
        if c < 1:
            rep.errors.append(f"channels[level {k}] must be >= 1, got {c}")
    for axis, w in zip(_AXES, model_cfg.window_size):
        if w < 1:
            rep.errors.append(f"window_size {axis} must be >= 1, got {w}")
    if model_cfg.tamw_mlp_reduction < 1:
        rep.errors.append(f"tamw_mlp_reduction must be >= 1, got {model_cfg.tamw_mlp_reduction}")
    if model_cfg.mcsa_levels is not None:
        for lv in model_cfg.mcsa_levels:
            if not 1 <= lv <= model_cfg.depth:
                rep.errors.append(f"mcsa_levels entry {lv} outside 1..{model_cfg.depth}")

    halving = 2 ** (model_cfg.depth - 1)
    for axis, s in zip(_AXES, train_cfg.patch_size):
        if s % halving != 0:
            rep.errors.append(
                f"patch_size {axis}={s} not divisible by 2^(depth-1)={halving}"
            )
    if train_cfg.batch_size < 1:
        rep.errors.append(f"batch_size must be >= 1, got {train_cfg.batch_size}")
    if train_cfg.learning_rate <= 0:
        rep.errors.append(f"learning_rate must be > 0, got {train_cfg.learning_rate}")
    if train_cfg.optimizer.lower() not in ("adam", "adamw"):
        rep.errors.append(f"unknown optimizer {train_cfg.optimizer!r}")

    if rep.errors:
        return rep

    # Per-level geometry: halving must stay integral, and clamped windows must tile.
    for k in range(1, model_cfg.depth + 1):
        shape = level_shape(train_cfg.patch_size, k)
        f = 2 ** (k - 1)
        for axis, s in zip(_AXES, train_cfg.patch_size):
            if s % f != 0:
                rep.errors.append(f"level {k}: patch {axis}={s} not divisible by {f}")
        if any(s < 1 for s in shape):
            rep.errors.append(f"level {k}: spatial extent {shape} collapsed to zero")
            continue
        win = effective_window(model_cfg.window_size, shape)
        if win != tuple(model_cfg.window_size):
            rep.notes.append(
                f"level {k}: window clamped from {tuple(model_cfg.window_size)} to {win} (extent {shape})"
            )
        for axis, s, w in zip(_AXES, shape, win):
            if s % w != 0:
                rep.errors.append(
                    f"level {k}: extent {axis}={s} not divisible by effective window {w}"
                )
    return rep


def resolve_seed(train_cfg: TrainConfig) -> int:
    """Apply the environment seed override, if set."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return train_cfg.seed
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from exc


# ---------------------------------------------------------------------------
# Flat key=value config files.
#
# One `key = value` pair per line, `#` starts a comment, keys match the
# dataclass field names below; tuples are comma-separated. Keys with the
# `phantom_` prefix are collected for the synthetic data generator.
# ---------------------------------------------------------------------------


def load_kv_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value config file into a string mapping."""
    mapping: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def _parse_value(raw: str, py_type: type, key: str):
    try:
        if py_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if py_type is int:
            return int(raw)
        if py_type is float:
            return float(raw)
        if py_type is str:
            return raw
        if py_type is tuple:
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {py_type.__name__}") from exc
    raise ConfigError(f"config key {key!r}: unsupported type {py_type}")


_TUPLE_PREFIXES = ("tuple",)


def _field_base_type(f) -> type:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    t = str(t)
    if t.startswith(_TUPLE_PREFIXES) or t.startswith("Triple"):
        return tuple
    for name, py in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if t.startswith(name):
            return py
    return str


def _dataclass_from_mapping(cls, mapping: dict[str, str], used: set[str]):
    kwargs = {}
    for f in fields(cls):
        if f.name in mapping:
            kwargs[f.name] = _parse_value(mapping[f.name], _field_base_type(f), f.name)
            used.add(f.name)
    return cls(**kwargs)


def configs_from_mapping(
    mapping: dict[str, str],
) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    """Build (ModelConfig, TrainConfig) plus leftover phantom_* keys from a flat mapping.

    Unknown keys without the phantom_ prefix are config errors, to catch typos.
    """
    used: set[str] = set()
    model_cfg = _dataclass_from_mapping(ModelConfig, mapping, used)
    train_cfg = _dataclass_from_mapping(TrainConfig, mapping, used)
    phantom: dict[str, str] = {}
    for key, value in mapping.items():
        if key in used:
            continue
        if key.startswith("phantom_"):
            phantom[key[len("phantom_"):]] = value
            continue
        raise ConfigError(f"unknown config key {key!r}")
    return model_cfg, train_cfg, phantom


def apply_overrides(cfg, **overrides):
    """Return a copy of a config dataclass with non-None overrides applied."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **changes) if changes else cfg
