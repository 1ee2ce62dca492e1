"""PNG export of mid-axial slices for qualitative inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .phantom import VolumePair


def to_png(array2d: np.ndarray, path: str | Path) -> None:
    """Min-max normalize a 2D array to 8-bit grayscale and write it."""
    arr = np.asarray(array2d, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)


def mid_axial(volume: np.ndarray) -> np.ndarray:
    """The (H, W) plane at the middle of the depth axis."""
    return volume[:, :, volume.shape[2] // 2]


def export_case_slices(
    pair: VolumePair,
    out_dir: str | Path,
    prob: np.ndarray | None = None,
    extra_maps: dict[str, np.ndarray] | None = None,
) -> list[Path]:
    """Write pet/ct/mask (and prediction plus any extra maps) slices for one case."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    maps: dict[str, np.ndarray] = {
        "pet": pair.pet,
        "ct": pair.ct,
        "mask": pair.mask.astype(np.float32),
    }
    if prob is not None:
        maps["pred"] = np.asarray(prob)
    if extra_maps:
        maps.update(extra_maps)
    for name, volume in maps.items():
        path = out / f"{pair.case_id}_{name}.png"
        to_png(mid_axial(np.asarray(volume)), path)
        written.append(path)
    return written
