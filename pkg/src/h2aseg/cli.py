"""Command-line harness: train, eval, ablate, diagnose, gen-data, export-slices.

Configuration comes from flat key=value files (see presets/), overridden by
CLI flags; the H2ASEG_SEED environment variable overrides the seed last.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import functools
import importlib.resources
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np
import torch

from .backbone import count_parameters
from .checkpoint import load_checkpoint, restore_model
from .config import (
    ModelConfig,
    TrainConfig,
    configs_from_mapping,
    load_kv_file,
    resolve_seed,
    validate_config,
)
from .errors import CheckpointMismatchError, ConfigError, ContractViolation, NumericError
from .experiment import (
    CaseStore,
    collect_emphasis,
    evaluate_checkpoint,
    make_store,
    open_dataset,
    predict_prob,
    run_ablation,
    run_training,
    write_emphasis_csv,
)
from .phantom import (
    PhantomConfig,
    apply_phantom_overrides,
    build_split,
    generate_case,
    save_case,
    save_manifest,
    save_phantom_config,
)
from .tamw import channel_partition
from .viz import export_case_slices, mid_axial, to_png

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_configs(config: str | None) -> tuple[ModelConfig, TrainConfig, PhantomConfig]:
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    phantom_cfg = PhantomConfig()
    if config is not None:
        path = Path(config)
        if not path.exists():
            preset = importlib.resources.files("h2aseg") / "presets" / f"{config}.cfg"
            if preset.is_file():
                path = preset  # type: ignore[assignment]
            else:
                raise ConfigError(f"config {config!r}: no such file or preset")
        mapping = load_kv_file(path)
        model_cfg, train_cfg, phantom_overrides = configs_from_mapping(mapping)
        phantom_cfg = apply_phantom_overrides(phantom_cfg, phantom_overrides)
    # Phantom geometry follows the training patch unless set explicitly.
    if tuple(phantom_cfg.shape) != tuple(train_cfg.patch_size):
        phantom_cfg = replace(phantom_cfg, shape=tuple(train_cfg.patch_size))
    return model_cfg, train_cfg, phantom_cfg


def _exit_on_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ContractViolation, CheckpointMismatchError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


config_opt = click.option("--config", type=str, default=None, help="Config file path or preset name (desk, paper, tiny).")
seed_opt = click.option("--seed", type=int, default=None, help="Override the training seed.")
out_opt = click.option("--out", type=click.Path(), required=True, help="Output directory.")


@click.group()
def main():
    """Dual-branch PET/CT segmentation: training, evaluation, and diagnostics."""


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--data", type=click.Path(exists=True), default=None, help="Dataset directory from gen-data; omit to generate phantoms in memory.")
@click.option("--cases", type=int, default=50, show_default=True, help="Phantom case count when no --data is given.")
@click.option("--no-mcsa", is_flag=True, help="Disable the cross-modal attention blocks.")
@click.option("--no-tamw", is_flag=True, help="Disable the channel-weighting blocks.")
@click.option("--overfit", type=int, default=None, metavar="K", help="Train and validate on the first K training cases.")
@click.option("--steps", type=int, default=None, help="Stop after this many optimizer steps.")
@click.option("--epochs", type=int, default=None, help="Override max epochs.")
@click.option("--lr", type=float, default=None, help="Override learning rate.")
@click.option("--batch-size", type=int, default=None)
@click.option("--target-dice", type=float, default=None, help="Early-stop once validation Dice reaches this value.")
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint in --out.")
@_exit_on_errors
def train(config, seed, out, data, cases, no_mcsa, no_tamw, overfit, steps, epochs, lr, batch_size, target_dice, resume):
    """Train a model on the phantom benchmark (or a gen-data dataset)."""
    model_cfg, train_cfg, phantom_cfg = _load_configs(config)
    if no_mcsa:
        model_cfg = replace(model_cfg, use_mcsa=False)
    if no_tamw:
        model_cfg = replace(model_cfg, use_tamw=False)
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    if epochs is not None:
        train_cfg = replace(train_cfg, max_epochs=epochs)
    if lr is not None:
        train_cfg = replace(train_cfg, learning_rate=lr)
    if batch_size is not None:
        train_cfg = replace(train_cfg, batch_size=batch_size)

    if data is not None:
        store = open_dataset(data)
        train_cfg = replace(train_cfg, patch_size=tuple(store.phantom_cfg.shape))
    else:
        phantom_cfg = replace(phantom_cfg, seed=resolve_seed(train_cfg))
        store = make_store(phantom_cfg, cases)

    report = validate_config(model_cfg, train_cfg)
    if not report.ok:
        raise ConfigError(str(report))

    train_entries = store.split("train")
    val_entries = store.split("val")
    if overfit is not None:
        train_entries = train_entries[:overfit]
        val_entries = train_entries
    click.echo(f"training on {len(train_entries)} cases, validating on {len(val_entries)}")
    model, record = run_training(
        model_cfg, train_cfg, store, train_entries, val_entries,
        out_dir=out, max_steps=steps, target_train_dice=target_dice,
        resume=resume, log_fn=click.echo,
    )
    click.echo(f"parameters: {record.parameter_count}")
    click.echo(f"best val dice: {record.best_val_dice:.2f} after {record.total_steps} steps")
    click.echo(f"record: {Path(out) / 'record.json'}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@config_opt
@out_opt
@click.option("--data", type=click.Path(exists=True), default=None, help="Dataset directory from gen-data.")
@click.option("--cases", type=int, default=50, show_default=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@_exit_on_errors
def eval_cmd(checkpoint, config, out, data, cases, split, threshold):
    """Evaluate a checkpoint on a dataset split; writes per-case and summary CSVs."""
    expected = None
    if config is not None:
        expected, _, _ = _load_configs(config)
    if data is not None:
        store = open_dataset(data)
    else:
        ckpt = load_checkpoint(checkpoint)
        phantom_cfg = PhantomConfig(shape=tuple(ckpt.patch_size))
        store = make_store(phantom_cfg, cases)
    case_metrics, summary = evaluate_checkpoint(
        checkpoint, store, split, out_dir=out, expected_cfg=expected, threshold=threshold
    )
    click.echo(f"evaluated {len(case_metrics)} cases from split {split!r}")
    for metric in ("dice", "hd95", "precision", "recall"):
        s = summary[metric]
        click.echo(f"{metric}: {s.mean:.2f} +/- {s.std:.2f} (n={s.n})")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--cases", type=int, default=50, show_default=True, help="Phantom benchmark size.")
@click.option("--seeds", type=int, default=3, show_default=True, help="Seeds per variant.")
@click.option("--epochs", type=int, default=None, help="Override max epochs per run.")
@click.option("--steps", type=int, default=None, help="Cap optimizer steps per run.")
@_exit_on_errors
def ablate(config, seed, out, cases, seeds, epochs, steps):
    """Run the 4-row module-toggle matrix and write a summary table."""
    model_cfg, train_cfg, phantom_cfg = _load_configs(config)
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    if epochs is not None:
        train_cfg = replace(train_cfg, max_epochs=epochs)
    base_seed = resolve_seed(train_cfg)
    phantom_cfg = replace(phantom_cfg, seed=base_seed)
    store = make_store(phantom_cfg, cases)
    seed_list = [base_seed + i for i in range(seeds)]
    rows = run_ablation(
        model_cfg, train_cfg, store, seed_list, out_dir=out, max_steps=steps, log_fn=click.echo
    )
    click.echo(f"{'variant':<10} {'dice':>7} {'hd95':>8} {'precision':>10} {'recall':>8}")
    for row in rows:
        click.echo(
            f"{row['variant']:<10} {row['dice']:>7.2f} {row['hd95']:>8.2f} "
            f"{row['precision']:>10.2f} {row['recall']:>8.2f}"
        )
    click.echo(f"table: {Path(out) / 'ablation.csv'}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@out_opt
@click.option("--data", type=click.Path(exists=True), default=None, help="Dataset directory from gen-data.")
@click.option("--cases", type=int, default=20, show_default=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--slice-cases", type=int, default=2, show_default=True, help="Cases to render as PNG slices.")
@_exit_on_errors
def diagnose(checkpoint, out, data, cases, split, slice_cases):
    """Per-depth channel-emphasis table plus feature-map slice export."""
    ckpt = load_checkpoint(checkpoint)
    model = restore_model(ckpt)
    if not model.cfg.use_tamw:
        raise ConfigError("checkpoint was trained without the channel-weighting module")
    if data is not None:
        store = open_dataset(data)
    else:
        store = make_store(PhantomConfig(shape=tuple(ckpt.patch_size)), cases)
    entries = store.split(split)
    if not entries:
        raise ConfigError(f"split {split!r} has no cases")

    rows = collect_emphasis(model, store, entries)
    out_path = Path(out)
    out_path.mkdir(parents=True, exist_ok=True)
    write_emphasis_csv(out_path / "emphasis.csv", rows)
    click.echo(f"{'depth':<6} {'fore_pet':>9} {'fore_ct':>9} {'back_pet':>9} {'back_ct':>9}")
    for row in rows:
        click.echo(
            f"{row['depth']:<6} {row['fore_pet']:>9.2f} {row['fore_ct']:>9.2f} "
            f"{row['back_pet']:>9.2f} {row['back_ct']:>9.2f}"
        )

    ch = model.cfg.channels
    device = next(model.parameters()).device
    for entry in entries[:slice_cases]:
        pair = store.get(entry)
        from .experiment import batch_tensors

        ct_t, pet_t, _ = batch_tensors([pair], device)
        capture: dict = {}
        with torch.no_grad():
            pyramid = model(ct_t, pet_t, capture=capture)
            prob = torch.sigmoid(pyramid[0])[0, 0].cpu().numpy()
        extra = {}
        if model.cfg.depth >= 2 and 2 in capture.get("tamw_weights", {}):
            w_fore, _ = capture["tamw_weights"][2]
            partition = channel_partition(ch[1], ch[2])
            f_pet, f_ct = capture["modality_features"][2]
            for name, feat, group in (("fpet2_fore", f_pet, "pet"), ("fct2_fore", f_ct, "ct")):
                group_idx = [i for i, lab in enumerate(partition) if lab == group]
                sel = [c for c, i in enumerate(group_idx) if w_fore[0, i] > 0]
                if sel:
                    extra[name] = feat[0, sel].mean(dim=0).cpu().numpy()
        written = export_case_slices(pair, out_path / "slices", prob=prob, extra_maps=extra)
        click.echo(f"wrote {len(written)} slices for {entry.case_id}")
    click.echo(f"emphasis table: {out_path / 'emphasis.csv'}")


@main.command("gen-data")
@config_opt
@seed_opt
@out_opt
@click.option("--cases", type=int, default=50, show_default=True)
@_exit_on_errors
def gen_data(config, seed, out, cases):
    """Generate a phantom dataset: case files, manifest, and phantom config."""
    _, train_cfg, phantom_cfg = _load_configs(config)
    if seed is not None:
        phantom_cfg = replace(phantom_cfg, seed=seed)
    out_path = Path(out)
    case_dir = out_path / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    entries = build_split(phantom_cfg, cases)
    lesion = 0
    for entry in entries:
        pair = generate_case(phantom_cfg, entry.seed)
        save_case(case_dir / f"{entry.case_id}.h2a", pair)
        lesion += int(pair.has_lesion)
    save_manifest(out_path / "manifest.txt", entries)
    save_phantom_config(out_path / "phantom.json", phantom_cfg)
    counts = {s: sum(1 for e in entries if e.split == s) for s in ("train", "val", "test")}
    click.echo(f"wrote {cases} cases ({lesion} with lesions) to {out_path}: {counts}")


@main.command("export-slices")
@out_opt
@click.option("--data", type=click.Path(exists=True), default=None, help="Dataset directory from gen-data.")
@click.option("--cases", type=int, default=10, show_default=True, help="Phantom case count when no --data is given.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None, help="Also render model predictions.")
@click.option("--limit", type=int, default=4, show_default=True, help="Cases to render.")
@_exit_on_errors
def export_slices(out, data, cases, split, checkpoint, limit):
    """Export mid-axial PET/CT/mask (and prediction) slices as PNG."""
    model = None
    if checkpoint is not None:
        model = restore_model(load_checkpoint(checkpoint))
    if data is not None:
        store = open_dataset(data)
    elif model is not None:
        store = make_store(PhantomConfig(shape=tuple(model.patch_size)), cases)
    else:
        store = make_store(PhantomConfig(), cases)
    entries = store.split(split)[:limit]
    if not entries:
        raise ConfigError(f"split {split!r} has no cases")
    n = 0
    for entry in entries:
        pair = store.get(entry)
        prob = predict_prob(model, pair) if model is not None else None
        n += len(export_case_slices(pair, out, prob=prob))
    click.echo(f"wrote {n} slice images to {out}")


if __name__ == "__main__":
    main()
