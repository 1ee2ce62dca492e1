"""Deterministic synthetic PET/CT case generator for desk-scale benchmarking.

Each case places three kinds of smooth ellipsoidal regions in a textured
volume:

* tumors: elevated PET uptake and a CT intensity anomaly; these form the mask.
* confounders: elevated PET uptake with normal CT (high-metabolism organs);
  excluded from the mask, so a PET-threshold segmenter must misclassify them.
* cold lesions: CT anomaly with suppressed PET uptake; also excluded, so a
  CT-only reading fails symmetrically.

Correct segmentation therefore requires fusing both modalities. Intensities
are in normalized units; all randomness flows from (config seed, case seed),
making every case bitwise reproducible.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractViolation

logger = logging.getLogger(__name__)

Triple = tuple[int, int, int]
FloatTriple = tuple[float, float, float]
Range = tuple[int, int]
RadiiRanges = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

MAGIC = b"H2APHNT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI3I3fI24x")  # magic, version, shape, spacing, flags; 64 bytes
assert _HEADER.size == 64

# Flat-top radial profile: 1 inside CORE_RHO, smoothstep falloff to 0 at the
# mask boundary rho = 1.
CORE_RHO = 0.8

_CASE_RETRY_STRIDE = 1_000_003  # seed perturbation when a layout is infeasible


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, intensity, and randomness knobs for case generation."""

    shape: Triple = (64, 64, 32)
    spacing: FloatTriple = (3.0, 2.0, 2.0)
    n_tumors: Range = (0, 2)
    n_confounders: Range = (1, 2)
    n_cold_lesions: Range = (0, 1)
    tumor_radii: RadiiRanges = ((4.0, 8.0), (4.0, 8.0), (3.0, 6.0))
    confounder_radii: RadiiRanges = ((4.0, 8.0), (4.0, 8.0), (3.0, 6.0))
    cold_radii: RadiiRanges = ((4.0, 8.0), (4.0, 8.0), (3.0, 6.0))
    ct_background: float = 0.35
    ct_texture: float = 0.06
    ct_anomaly: float = 0.25
    pet_background: float = 0.15
    pet_hot: float = 0.6
    pet_cold_factor: float = 0.9
    ct_noise: float = 0.02
    pet_noise: float = 0.05
    min_pet_contrast: float = 0.3
    min_ct_contrast: float = 0.1
    mask_fraction: tuple[float, float] = (0.001, 0.05)
    seed: int = 0


@dataclass(frozen=True)
class Region:
    """One placed ellipsoid: kind is tumor, confounder, or cold."""

    kind: str
    center: FloatTriple
    radii: FloatTriple


@dataclass
class VolumePair:
    """Co-registered CT/PET volumes with the tumor mask and voxel spacing."""

    ct: np.ndarray
    pet: np.ndarray
    mask: np.ndarray
    spacing: FloatTriple
    case_id: str
    has_lesion: bool
    regions: tuple[Region, ...] | None = None

    def __post_init__(self):
        if not (self.ct.shape == self.pet.shape == self.mask.shape):
            raise ContractViolation(
                f"volume shapes differ: ct {self.ct.shape}, pet {self.pet.shape}, mask {self.mask.shape}"
            )


def ellipsoid_rho(shape: Triple, center: Sequence[float], radii: Sequence[float]) -> np.ndarray:
    """Normalized ellipsoidal radius per voxel center: rho <= 1 is the support."""
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return np.sqrt(acc)


def _profile(rho: np.ndarray) -> np.ndarray:
    """Flat top inside CORE_RHO with a C1 smoothstep falloff, zero outside rho >= 1."""
    t = np.clip((1.0 - rho) / (1.0 - CORE_RHO), 0.0, 1.0)
    return np.where(rho <= CORE_RHO, 1.0, t * t * (3.0 - 2.0 * t))


def _spheres_overlap(a: Region, b: Region, gap: float = 1.0) -> bool:
    d = np.linalg.norm(np.asarray(a.center) - np.asarray(b.center))
    return d < max(a.radii) + max(b.radii) + gap


def _place_regions(cfg: PhantomConfig, rng: np.random.Generator) -> list[Region] | None:
    """Place all regions, allowing same-kind overlap but not cross-kind overlap."""
    plan = [
        ("tumor", cfg.n_tumors, cfg.tumor_radii),
        ("confounder", cfg.n_confounders, cfg.confounder_radii),
        ("cold", cfg.n_cold_lesions, cfg.cold_radii),
    ]
    regions: list[Region] = []
    for kind, (lo, hi), radii_ranges in plan:
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            placed = False
            for _attempt in range(50):
                radii = tuple(float(rng.uniform(a, b)) for a, b in radii_ranges)
                center = []
                feasible = True
                for s, r in zip(cfg.shape, radii):
                    margin = r + 1.0
                    if s - margin <= margin:
                        feasible = False
                        break
                    center.append(float(rng.uniform(margin, s - margin)))
                if not feasible:
                    continue
                cand = Region(kind, tuple(center), radii)
                if any(r.kind != kind and _spheres_overlap(cand, r) for r in regions):
                    continue
                regions.append(cand)
                placed = True
                break
            if not placed:
                return None
    return regions


def generate_case(cfg: PhantomConfig, case_seed: int) -> VolumePair:
    """Deterministically synthesize one co-registered case.

    Infeasible layouts (crowded placements or a mask fraction outside the
    configured bounds) are retried; if retries run out, the case is
    regenerated under a perturbed seed and the substitution is logged.
    """
    for perturbation in range(6):
        seed = case_seed + perturbation * _CASE_RETRY_STRIDE
        rng = np.random.default_rng([cfg.seed, seed])
        for _layout in range(10):
            regions = _place_regions(cfg, rng)
            if regions is None:
                continue
            mask = np.zeros(cfg.shape, dtype=bool)
            for r in regions:
                if r.kind == "tumor":
                    mask |= ellipsoid_rho(cfg.shape, r.center, r.radii) <= 1.0
            if mask.any():
                frac = mask.mean()
                lo, hi = cfg.mask_fraction
                if not lo <= frac <= hi:
                    continue
            pair = _render(cfg, rng, regions, mask, case_seed)
            if perturbation:
                logger.warning(
                    "case %s: layout infeasible, regenerated with perturbed seed %d",
                    pair.case_id,
                    seed,
                )
            return pair
    raise ContractViolation(
        f"could not place a feasible layout for case seed {case_seed}; "
        "region counts/radii too large for the volume"
    )


def _render(
    cfg: PhantomConfig,
    rng: np.random.Generator,
    regions: list[Region],
    mask: np.ndarray,
    case_seed: int,
) -> VolumePair:
    texture = rng.standard_normal(cfg.shape)
    texture = gaussian_filter(texture, sigma=6.0)
    std = texture.std()
    if std > 0:
        texture *= cfg.ct_texture / std

    ct = np.full(cfg.shape, cfg.ct_background, dtype=np.float64) + texture
    uptake = np.full(cfg.shape, cfg.pet_background, dtype=np.float64)
    cold_suppression = np.zeros(cfg.shape, dtype=np.float64)

    for r in regions:
        prof = _profile(ellipsoid_rho(cfg.shape, r.center, r.radii))
        if r.kind == "tumor":
            ct += cfg.ct_anomaly * prof
            uptake += cfg.pet_hot * prof
        elif r.kind == "confounder":
            uptake += cfg.pet_hot * prof
        elif r.kind == "cold":
            ct += cfg.ct_anomaly * prof
            cold_suppression = np.maximum(cold_suppression, cfg.pet_cold_factor * prof)

    pet = uptake * (1.0 - cold_suppression)
    if cfg.ct_noise > 0:
        ct = ct + rng.normal(0.0, cfg.ct_noise, cfg.shape)
    if cfg.pet_noise > 0:
        pet = pet + rng.normal(0.0, cfg.pet_noise, cfg.shape)

    return VolumePair(
        ct=ct.astype(np.float32),
        pet=pet.astype(np.float32),
        mask=mask,
        spacing=cfg.spacing,
        case_id=f"case{case_seed:06d}",
        has_lesion=bool(mask.any()),
        regions=tuple(regions),
    )


def unimodal_threshold(cfg: PhantomConfig) -> float:
    """PET cut halfway between background uptake and the hot plateau."""
    return cfg.pet_background + 0.5 * cfg.pet_hot


def pet_threshold_segment(pet: np.ndarray, threshold: float) -> np.ndarray:
    """The unimodal reference segmenter: foreground wherever PET exceeds the cut."""
    return np.asarray(pet) > threshold


# ---------------------------------------------------------------------------
# On-disk format: 64-byte header, then little-endian float32 CT, float32 PET,
# uint8 mask, all in C order. The manifest is one "case_id seed split" line
# per case; together with the phantom config it regenerates every volume.
# ---------------------------------------------------------------------------


def save_case(path: str | Path, pair: VolumePair) -> None:
    shape = pair.ct.shape
    flags = 1 if pair.has_lesion else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *shape, *(float(s) for s in pair.spacing), flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pair.ct, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pair.pet, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pair.mask, dtype=np.uint8).tobytes())


def load_case(path: str | Path) -> VolumePair:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated case file")
    magic, version, h, w, d, sh, sw, sd, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    n = h * w * d
    expected = _HEADER.size + 4 * n + 4 * n + n
    if len(raw) != expected:
        raise ContractViolation(f"{path}: expected {expected} bytes, got {len(raw)}")
    off = _HEADER.size
    ct = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(h, w, d).copy()
    off += 4 * n
    pet = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(h, w, d).copy()
    off += 4 * n
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(h, w, d).astype(bool)
    return VolumePair(
        ct=ct,
        pet=pet,
        mask=mask,
        spacing=(sh, sw, sd),
        case_id=path.stem,
        has_lesion=bool(flags & 1),
    )


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    seed: int
    split: str


def build_split(
    cfg: PhantomConfig, n_cases: int, ratios: tuple[int, int, int] = (6, 2, 2)
) -> list[ManifestEntry]:
    """Assign deterministic, disjoint case seeds to train/val/test splits."""
    if n_cases < 5:
        raise ContractViolation(f"need at least 5 cases to split, got {n_cases}")
    total = sum(ratios)
    n_train = n_cases * ratios[0] // total
    n_val = n_cases * ratios[1] // total
    order = np.random.default_rng([cfg.seed, 0xC0DE]).permutation(n_cases)
    entries = []
    for i, idx in enumerate(order):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        seed = int(idx)
        entries.append(ManifestEntry(case_id=f"case{seed:06d}", seed=seed, split=split))
    return entries


def save_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.case_id} {e.seed} {e.split}\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ContractViolation(f"{path}:{lineno}: expected 'case_id seed split'")
        entries.append(ManifestEntry(case_id=parts[0], seed=int(parts[1]), split=parts[2]))
    return entries


def save_phantom_config(path: str | Path, cfg: PhantomConfig) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2) + "\n")


def load_phantom_config(path: str | Path) -> PhantomConfig:
    data = json.loads(Path(path).read_text())

    def tup(x):
        return tuple(tup(v) if isinstance(v, list) else v for v in x)

    kwargs = {k: tup(v) if isinstance(v, list) else v for k, v in data.items()}
    return PhantomConfig(**kwargs)


_INT_PAIR_FIELDS = {"n_tumors", "n_confounders", "n_cold_lesions"}
_RADII_FIELDS = {"tumor_radii", "confounder_radii", "cold_radii"}
_FLOAT_TUPLE_FIELDS = {"spacing", "mask_fraction"}
_INT_TUPLE_FIELDS = {"shape"}


def apply_phantom_overrides(cfg: PhantomConfig, overrides: dict[str, str]) -> PhantomConfig:
    """Apply flat-file phantom_* overrides; radii are six comma-separated numbers."""
    changes = {}
    for key, raw in overrides.items():
        if key in _INT_PAIR_FIELDS:
            parts = [int(p) for p in raw.split(",")]
            changes[key] = (parts[0], parts[-1])
        elif key in _RADII_FIELDS:
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 6:
                raise ContractViolation(f"phantom_{key}: expected 6 numbers, got {raw!r}")
            changes[key] = ((parts[0], parts[1]), (parts[2], parts[3]), (parts[4], parts[5]))
        elif key in _FLOAT_TUPLE_FIELDS:
            changes[key] = tuple(float(p) for p in raw.split(","))
        elif key in _INT_TUPLE_FIELDS:
            changes[key] = tuple(int(p) for p in raw.split(","))
        elif key in ("seed",):
            changes[key] = int(raw)
        elif hasattr(cfg, key):
            changes[key] = float(raw)
        else:
            raise ContractViolation(f"unknown phantom config key {key!r}")
    return replace(cfg, **changes)
