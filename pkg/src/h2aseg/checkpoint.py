"""Single-file checkpoint archive.

A checkpoint is an NPZ (zip) archive mapping hierarchical parameter names to
shape-tagged little-endian arrays:

* ``param/<state_dict_name>``: model tensors,
* ``opt/<index>/<slot>``: optimizer slots per parameter index (Adam moments),
* ``__meta__``: a JSON string with format version, step/epoch counters, the
  model config echo, patch size, optimizer param groups, and free-form extras.

The name schema is stable so other tooling can read the arrays directly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .backbone import H2ASeg
from .config import ModelConfig, Triple
from .errors import CheckpointMismatchError, ContractViolation

FORMAT_VERSION = 1


def _model_cfg_to_jsonable(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    return d


def _model_cfg_from_jsonable(d: dict) -> ModelConfig:
    kwargs = dict(d)
    kwargs["channels"] = tuple(kwargs["channels"])
    kwargs["window_size"] = tuple(kwargs["window_size"])
    if kwargs.get("mcsa_levels") is not None:
        kwargs["mcsa_levels"] = tuple(kwargs["mcsa_levels"])
    return ModelConfig(**kwargs)


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    patch_size: Triple
    params: dict[str, np.ndarray]
    opt_state: dict[int, dict[str, np.ndarray]]
    param_groups: list[dict] | None
    step: int
    epoch: int
    extra: dict[str, Any]


def save_checkpoint(
    path: str | Path,
    model: H2ASeg,
    step: int = 0,
    epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = _little_endian(tensor.detach().cpu().numpy())

    param_groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        param_groups = [
            {k: v for k, v in group.items() if k != "params"} | {"params": group["params"]}
            for group in state["param_groups"]
        ]
        for idx, slots in state["state"].items():
            for slot, value in slots.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt/{idx}/{slot}"] = _little_endian(value.detach().cpu().numpy())
                else:
                    arrays[f"opt/{idx}/{slot}"] = np.asarray(value)

    meta = {
        "format": FORMAT_VERSION,
        "step": int(step),
        "epoch": int(epoch),
        "patch_size": list(model.patch_size),
        "model_config": _model_cfg_to_jsonable(model.cfg),
        "param_groups": param_groups,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.asarray(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz:
            raise ContractViolation(f"{path}: not a checkpoint archive (missing __meta__)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != FORMAT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint format {meta.get('format')}")
        params: dict[str, np.ndarray] = {}
        opt_state: dict[int, dict[str, np.ndarray]] = {}
        for key in npz.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = npz[key]
            elif key.startswith("opt/"):
                _, idx, slot = key.split("/", 2)
                opt_state.setdefault(int(idx), {})[slot] = npz[key]
    return Checkpoint(
        model_cfg=_model_cfg_from_jsonable(meta["model_config"]),
        patch_size=tuple(meta["patch_size"]),
        params=params,
        opt_state=opt_state,
        param_groups=meta.get("param_groups"),
        step=meta["step"],
        epoch=meta["epoch"],
        extra=meta.get("extra", {}),
    )


def check_compatible(ckpt: Checkpoint, requested: ModelConfig) -> None:
    """Raise with the exact differing keys when configs disagree."""
    stored = _model_cfg_to_jsonable(ckpt.model_cfg)
    wanted = _model_cfg_to_jsonable(requested)
    diffs = {k: (stored[k], wanted[k]) for k in stored if stored[k] != wanted[k]}
    if diffs:
        raise CheckpointMismatchError(diffs)


def restore_model(ckpt: Checkpoint) -> H2ASeg:
    model = H2ASeg(ckpt.model_cfg, ckpt.patch_size)
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    """Load saved moment estimates and param groups into a fresh optimizer."""
    if not ckpt.opt_state:
        return
    state_dict = optimizer.state_dict()
    if ckpt.param_groups is not None:
        state_dict["param_groups"] = ckpt.param_groups
    state_dict["state"] = {
        idx: {slot: torch.from_numpy(np.ascontiguousarray(arr)) for slot, arr in slots.items()}
        for idx, slots in ckpt.opt_state.items()
    }
    optimizer.load_state_dict(state_dict)
