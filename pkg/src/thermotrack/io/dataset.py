"""On-disk sequences.

Layout of one sequence directory::

    seq_000/
      rgb/000000.png ...   8-bit RGB frames
      tir/000000.png ...   8-bit grayscale thermal frames
      gt.json              {"boxes": [[x, y, w, h], ...], "alt_boxes": [...] or null, ...}
      desc.json            ["a red square moving right", ...]

A dataset root holds one such directory per sequence.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from thermotrack.harness.synthetic import SequenceRecord, TargetSpec
from thermotrack.io.cache import cache_key, get_cache


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_sequence(seq: SequenceRecord, directory: str | Path) -> Path:
    """Write ``seq`` as PNG frames plus JSON annotations."""
    directory = Path(directory)
    for sub in ("rgb", "tir"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for t, (rgb, tir) in enumerate(seq.frames):
        Image.fromarray(_to_uint8(rgb).transpose(1, 2, 0)).save(directory / "rgb" / f"{t:06d}.png")
        Image.fromarray(_to_uint8(tir[0])).save(directory / "tir" / f"{t:06d}.png")
    gt = {
        "name": seq.name,
        "seed": seq.seed,
        "edge": seq.edge,
        "boxes": seq.gt_boxes.tolist(),
        "alt_boxes": None if seq.gt_boxes_alt is None else seq.gt_boxes_alt.tolist(),
        "target": None if seq.target is None else asdict(seq.target),
        "night": None if seq.night is None else seq.night.astype(int).tolist(),
        "occluded": None if seq.occluded is None else seq.occluded.astype(int).tolist(),
    }
    (directory / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
    (directory / "desc.json").write_text(json.dumps(seq.descriptions, indent=1))
    return directory


def save_dataset(sequences: Sequence[SequenceRecord], root: str | Path) -> list[Path]:
    root = Path(root)
    return [save_sequence(seq, root / seq.name) for seq in sequences]


def _read_sequence(directory: Path) -> SequenceRecord:
    gt = json.loads((directory / "gt.json").read_text())
    descriptions = json.loads((directory / "desc.json").read_text())
    n = len(gt["boxes"])
    rgb = np.empty((n, 3, gt["edge"], gt["edge"]))
    tir = np.empty_like(rgb)
    for t in range(n):
        with Image.open(directory / "rgb" / f"{t:06d}.png") as im:
            rgb[t] = np.asarray(im.convert("RGB"), dtype=float).transpose(2, 0, 1) / 255.0
        with Image.open(directory / "tir" / f"{t:06d}.png") as im:
            tir[t] = (np.asarray(im.convert("L"), dtype=float) / 255.0)[None]
    alt = gt.get("alt_boxes")
    target = gt.get("target")
    if target is not None and target.get("start") is not None:
        target["start"] = tuple(target["start"])
    return SequenceRecord(
        rgb=rgb,
        tir=tir,
        gt_boxes=np.array(gt["boxes"], dtype=float),
        descriptions=list(descriptions),
        seed=gt.get("seed", 0),
        gt_boxes_alt=None if alt is None else np.array(alt, dtype=float),
        target=None if target is None else TargetSpec(**target),
        night=None if gt.get("night") is None else np.array(gt["night"], dtype=bool),
        occluded=None if gt.get("occluded") is None else np.array(gt["occluded"], dtype=bool),
        name=gt.get("name", directory.name),
    )


def load_sequence(directory: str | Path, *, use_cache: bool = True) -> SequenceRecord:
    """Read one sequence directory, through the disk cache when enabled.

    Raises
    ------
    FileNotFoundError
        If ``directory`` has no ``gt.json``.
    """
    directory = Path(directory)
    stamp = directory / "gt.json"
    if not stamp.exists():
        msg = f"no sequence at {directory} (missing gt.json)"
        raise FileNotFoundError(msg)
    if not use_cache:
        return _read_sequence(directory)
    cache = get_cache()
    key = cache_key("seq", directory, stamp)
    seq = cache.get(key)
    if seq is None:
        seq = _read_sequence(directory)
        cache.set(key, seq)
    return seq


def sequence_dirs(root: str | Path) -> list[Path]:
    """The sequence directories under ``root`` (or ``root`` itself)."""
    root = Path(root)
    if (root / "gt.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "gt.json").exists()) if root.is_dir() else []
    if not dirs:
        msg = f"no sequences found under {root}"
        raise FileNotFoundError(msg)
    return dirs


def load_dataset(root: str | Path, *, use_cache: bool = True) -> list[SequenceRecord]:
    return [load_sequence(d, use_cache=use_cache) for d in sequence_dirs(root)]
