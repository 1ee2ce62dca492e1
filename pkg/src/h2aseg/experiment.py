"""Training, evaluation, ablation, and diagnostic runs over the phantom benchmark.

A run is reproducible from its record: the record stores every config, the
seed, and the data manifest, and shuffling is a stateless function of
(seed, epoch), so an interrupted run resumed from its last checkpoint walks
the same batch sequence. Training logs are append-only CSV; checkpoints keep
the optimizer state for step-continuous resume.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import H2ASeg, build_model, count_parameters
from .checkpoint import (
    Checkpoint,
    check_compatible,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from .config import ModelConfig, TrainConfig, resolve_seed, validate_config
from .errors import ConfigError, ContractViolation, NumericError
from .loss import total_loss
from .metrics import (
    CaseMetrics,
    MetricSummary,
    aggregate,
    dice_precision_recall,
    evaluate_case,
    write_case_csv,
    write_summary_csv,
)
from .phantom import (
    ManifestEntry,
    PhantomConfig,
    VolumePair,
    build_split,
    generate_case,
    load_case,
)
from .tamw import channel_partition, emphasis_stats

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("mcsa", True, False),
    ("tamw", False, True),
    ("both", True, True),
)


def enable_determinism(seed: int) -> None:
    """Documented determinism mode: fixed seeds plus deterministic kernels.

    On a fixed platform (same device, dtype, and thread settings) this makes
    parameter init, batch order, and every training step bitwise repeatable.
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


class CaseStore:
    """Cached access to phantom cases, from disk when available else regenerated."""

    def __init__(
        self,
        phantom_cfg: PhantomConfig,
        entries: Sequence[ManifestEntry],
        case_dir: str | Path | None = None,
    ):
        self.phantom_cfg = phantom_cfg
        self.entries = list(entries)
        self.case_dir = Path(case_dir) if case_dir is not None else None
        self._cache: dict[str, VolumePair] = {}

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def get(self, entry: ManifestEntry) -> VolumePair:
        pair = self._cache.get(entry.case_id)
        if pair is None:
            path = None if self.case_dir is None else self.case_dir / f"{entry.case_id}.h2a"
            if path is not None and path.exists():
                pair = load_case(path)
            else:
                pair = generate_case(self.phantom_cfg, entry.seed)
            self._cache[entry.case_id] = pair
        return pair


def make_store(phantom_cfg: PhantomConfig, n_cases: int) -> CaseStore:
    """In-memory benchmark: split manifest plus on-demand generation."""
    return CaseStore(phantom_cfg, build_split(phantom_cfg, n_cases))


def open_dataset(data_dir: str | Path) -> CaseStore:
    """Load a gen-data directory: manifest, phantom config, and case files."""
    from .phantom import load_manifest, load_phantom_config

    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    cfg_path = data_dir / "phantom.json"
    if not manifest.exists() or not cfg_path.exists():
        raise ConfigError(f"{data_dir}: missing manifest.txt or phantom.json (run gen-data first)")
    return CaseStore(load_phantom_config(cfg_path), load_manifest(manifest), data_dir / "cases")


def _to_tensor(volume: np.ndarray, device: torch.device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32)).unsqueeze(0).to(device)


def batch_tensors(
    pairs: Sequence[VolumePair], device: torch.device
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    ct = torch.stack([_to_tensor(p.ct, device) for p in pairs])
    pet = torch.stack([_to_tensor(p.pet, device) for p in pairs])
    gt = torch.stack([_to_tensor(p.mask.astype(np.float32), device) for p in pairs])
    return ct, pet, gt


def predict_prob(model: H2ASeg, pair: VolumePair, device: torch.device | None = None) -> np.ndarray:
    """Full-resolution foreground probability for one case."""
    device = device or next(model.parameters()).device
    ct, pet, _ = batch_tensors([pair], device)
    with torch.no_grad():
        pyramid = model(ct, pet)
        prob = torch.sigmoid(pyramid[0])
    return prob[0, 0].cpu().numpy()


def _mean_lesion_dice(model: H2ASeg, store: CaseStore, entries: Sequence[ManifestEntry]) -> float:
    """Mean foreground Dice over lesion cases; the model-selection signal."""
    dices = []
    for entry in entries:
        pair = store.get(entry)
        if not pair.mask.any():
            continue
        pred = predict_prob(model, pair) > 0.5
        dice, _, _ = dice_precision_recall(pred, pair.mask)
        dices.append(dice)
    return float(np.mean(dices)) if dices else math.nan


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_total: float
    val_dice: float
    seconds: float


@dataclass
class ExperimentRecord:
    """Everything needed to reproduce and audit one training run."""

    seed: int
    model_cfg: dict
    train_cfg: dict
    phantom_cfg: dict
    n_train: int
    n_val: int
    parameter_count: int
    torch_version: str = torch.__version__
    epochs: list[dict] = field(default_factory=list)
    total_steps: int = 0
    best_val_dice: float = math.nan
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None
    final_metrics: dict | None = None
    wall_seconds: float = 0.0

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=float) + "\n")


class _TrainLog:
    """Append-only per-step loss log: step, level, bce, dice, total."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None and not path.exists():
            path.write_text("step,level,bce,dice,total\n")

    def write(self, step: int, report) -> None:
        if self.path is None:
            return
        total = report.total.item()
        with open(self.path, "a") as fh:
            for k, (b, d) in enumerate(zip(report.bce, report.dice), start=1):
                fh.write(f"{step},{k},{b.item():.6f},{d.item():.6f},{total:.6f}\n")


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    store: CaseStore,
    train_entries: Sequence[ManifestEntry],
    val_entries: Sequence[ManifestEntry],
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    target_train_dice: float | None = None,
    resume: bool = False,
    device: str | None = None,
    log_fn=None,
) -> tuple[H2ASeg, ExperimentRecord]:
    """Adam training with per-epoch validation and best/last checkpointing.

    Early-stops when val Dice reaches target_train_dice (used by overfit
    runs, where the validation entries are the training entries).
    """
    report = validate_config(model_cfg, train_cfg)
    if not report.ok:
        raise ConfigError(str(report))
    if tuple(store.phantom_cfg.shape) != tuple(train_cfg.patch_size):
        raise ConfigError(
            f"phantom shape {store.phantom_cfg.shape} != train patch size {train_cfg.patch_size}"
        )
    if not train_entries:
        raise ConfigError("no training cases")

    seed = resolve_seed(train_cfg)
    enable_determinism(seed)
    dev = torch.device(device) if device else torch.device("cuda" if torch.cuda.is_available() else "cpu")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    best_path = out_path / "best.npz" if out_path else None
    last_path = out_path / "last.npz" if out_path else None

    start_epoch = 0
    step = 0
    best_val = -math.inf
    ckpt = None
    if resume:
        if last_path is None or not last_path.exists():
            raise ConfigError("resume requested but no last checkpoint found")
        ckpt = load_checkpoint(last_path)
        check_compatible(ckpt, model_cfg)
        model = restore_model(ckpt).to(dev)
        start_epoch = ckpt.epoch
        step = ckpt.step
        best_val = ckpt.extra.get("best_val_dice", -math.inf)
    else:
        model = build_model(model_cfg, train_cfg.patch_size, seed=seed).to(dev)

    opt_cls = torch.optim.AdamW if train_cfg.optimizer.lower() == "adamw" else torch.optim.Adam
    optimizer = opt_cls(
        model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay
    )
    if ckpt is not None:
        restore_optimizer(optimizer, ckpt)

    record = ExperimentRecord(
        seed=seed,
        model_cfg=asdict(model_cfg),
        train_cfg=asdict(train_cfg),
        phantom_cfg=asdict(store.phantom_cfg),
        n_train=len(train_entries),
        n_val=len(val_entries),
        parameter_count=count_parameters(model),
    )
    log = _TrainLog(out_path / "train_log.csv" if out_path else None)
    t_start = time.time()
    stop = False

    for epoch in range(start_epoch, train_cfg.max_epochs):
        epoch_t0 = time.time()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_entries))
        losses = []
        epoch_steps = 0
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            batch_entries = [train_entries[i] for i in idx]
            ct, pet, gt = batch_tensors([store.get(e) for e in batch_entries], dev)
            optimizer.zero_grad()
            loss_report = total_loss(model(ct, pet), gt, expected_depth=model_cfg.depth)
            if not torch.isfinite(loss_report.total):
                ids = [e.case_id for e in batch_entries]
                if out_path is not None:
                    (out_path / "failure.json").write_text(
                        json.dumps({"step": step, "epoch": epoch, "batch_cases": ids}) + "\n"
                    )
                raise NumericError(f"non-finite loss at step {step} on batch {ids}")
            loss_report.total.backward()
            optimizer.step()
            step += 1
            epoch_steps += 1
            losses.append(loss_report.total.item())
            log.write(step, loss_report)
            if max_steps is not None and step >= max_steps:
                stop = True
                break

        val_dice = _mean_lesion_dice(model, store, val_entries) if val_entries else math.nan
        stats = EpochStats(
            epoch=epoch,
            steps=epoch_steps,
            mean_total=float(np.mean(losses)) if losses else math.nan,
            val_dice=val_dice,
            seconds=time.time() - epoch_t0,
        )
        record.epochs.append(asdict(stats))
        if log_fn:
            log_fn(f"epoch {epoch}: loss {stats.mean_total:.4f} val_dice {val_dice:.2f} ({stats.seconds:.1f}s)")

        if not math.isnan(val_dice) and val_dice > best_val:
            best_val = val_dice
            if best_path is not None:
                save_checkpoint(best_path, model, step=step, epoch=epoch + 1, optimizer=optimizer,
                                extra={"val_dice": val_dice})
        if last_path is not None:
            save_checkpoint(last_path, model, step=step, epoch=epoch + 1, optimizer=optimizer,
                            extra={"best_val_dice": best_val})
        if target_train_dice is not None and not math.isnan(val_dice) and val_dice >= target_train_dice:
            stop = True
        if stop:
            break

    record.total_steps = step
    record.best_val_dice = best_val if best_val > -math.inf else math.nan
    record.best_checkpoint = str(best_path) if best_path is not None and best_path.exists() else None
    record.last_checkpoint = str(last_path) if last_path is not None else None
    record.wall_seconds = time.time() - t_start
    if out_path is not None:
        record.save(out_path / "record.json")
    return model, record


def evaluate_split(
    model: H2ASeg,
    store: CaseStore,
    entries: Sequence[ManifestEntry],
    out_dir: str | Path | None = None,
    threshold: float = 0.5,
) -> tuple[list[CaseMetrics], dict[str, MetricSummary]]:
    """Per-case metrics plus the lesion-policy aggregate; optionally writes CSVs."""
    if not entries:
        raise ConfigError("evaluation split is empty")
    cases = []
    for entry in entries:
        pair = store.get(entry)
        prob = predict_prob(model, pair)
        cases.append(evaluate_case(prob, pair.mask, pair.spacing, case_id=entry.case_id, threshold=threshold))
    summary = aggregate(cases)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_case_csv(out / "cases.csv", cases)
        write_summary_csv(out / "summary.csv", summary)
    return cases, summary


def evaluate_checkpoint(
    ckpt_path: str | Path,
    store: CaseStore,
    split: str,
    out_dir: str | Path | None = None,
    expected_cfg: ModelConfig | None = None,
    threshold: float = 0.5,
) -> tuple[list[CaseMetrics], dict[str, MetricSummary]]:
    ckpt = load_checkpoint(ckpt_path)
    if expected_cfg is not None:
        check_compatible(ckpt, expected_cfg)
    model = restore_model(ckpt)
    entries = store.split(split)
    if not entries:
        raise ConfigError(f"split {split!r} has no cases")
    return evaluate_split(model, store, entries, out_dir=out_dir, threshold=threshold)


def run_ablation(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    store: CaseStore,
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    log_fn=None,
) -> list[dict]:
    """The four-row module-toggle matrix, each averaged over the given seeds.

    Every variant trains on the store's train split, selects on val Dice, and
    reports test metrics from its best checkpoint.
    """
    train_entries = store.split("train")
    val_entries = store.split("val")
    test_entries = store.split("test")
    rows = []
    for name, use_mcsa, use_tamw in ABLATION_VARIANTS:
        cfg = replace(model_cfg, use_mcsa=use_mcsa, use_tamw=use_tamw)
        summaries = []
        params = None
        for seed in seeds:
            tc = replace(train_cfg, seed=int(seed))
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            model, record = run_training(
                cfg, tc, store, train_entries, val_entries,
                out_dir=run_dir, max_steps=max_steps, log_fn=log_fn,
            )
            params = record.parameter_count
            if record.best_checkpoint:
                model = restore_model(load_checkpoint(record.best_checkpoint))
            _, summary = evaluate_split(model, store, test_entries)
            summaries.append(summary)
            if log_fn:
                log_fn(f"{name} seed {seed}: test dice {summary['dice'].mean:.2f}")
        row = {
            "variant": name,
            "mcsa": use_mcsa,
            "tamw": use_tamw,
            "parameters": params,
            "seeds": list(int(s) for s in seeds),
        }
        for metric in ("dice", "hd95", "precision", "recall"):
            means = [s[metric].mean for s in summaries if not math.isnan(s[metric].mean)]
            row[metric] = float(np.mean(means)) if means else math.nan
            row[f"{metric}_std"] = float(np.std(means)) if means else math.nan
        rows.append(row)
    if out_dir is not None:
        _write_ablation_csv(Path(out_dir) / "ablation.csv", rows)
    return rows


def _write_ablation_csv(path: Path, rows: list[dict]) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "mcsa", "tamw", "dice", "dice_std", "hd95", "hd95_std",
            "precision", "precision_std", "recall", "recall_std", "parameters"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])


def collect_emphasis(
    model: H2ASeg,
    store: CaseStore,
    entries: Sequence[ManifestEntry],
) -> list[dict]:
    """Per-depth positive-weight percentages, averaged over a split.

    One row per depth with foreground/background emphasis for PET, CT, and
    (as a diagnostic) the decoder channels.
    """
    if not model.cfg.use_tamw:
        raise ConfigError("checkpoint was trained without the channel-weighting module")
    depth = model.cfg.depth
    ch = model.cfg.channels
    sums: dict[int, dict[str, list[float]]] = {
        k: {key: [] for key in ("fore_pet", "fore_ct", "fore_decoder", "back_pet", "back_ct", "back_decoder")}
        for k in range(1, depth)
    }
    device = next(model.parameters()).device
    for entry in entries:
        pair = store.get(entry)
        ct, pet, _ = batch_tensors([pair], device)
        capture: dict = {}
        with torch.no_grad():
            model(ct, pet, capture=capture)
        for k, (w_fore, w_back) in capture["tamw_weights"].items():
            partition = channel_partition(ch[k - 1], ch[k])
            fore = emphasis_stats(w_fore, partition)
            back = emphasis_stats(w_back, partition)
            for group in ("pet", "ct", "decoder"):
                sums[k][f"fore_{group}"].append(fore[group])
                sums[k][f"back_{group}"].append(back[group])
    rows = []
    for k in range(1, depth):
        row = {"depth": k}
        for key, values in sums[k].items():
            row[key] = float(np.mean(values)) if values else math.nan
        rows.append(row)
    return rows


def write_emphasis_csv(path: str | Path, rows: list[dict]) -> None:
    import csv

    cols = ["depth", "fore_pet", "fore_ct", "back_pet", "back_ct", "fore_decoder", "back_decoder"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row["depth"]] + [f"{row[c]:.2f}" for c in cols[1:]])
