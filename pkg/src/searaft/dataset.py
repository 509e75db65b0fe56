"""On-disk corpora: a manifest plus tensor dumps and ``.flo`` ground truth.

Directory layout::

    manifest.yaml          run manifest with a ``samples`` list
    0000_i1.t4 0000_i2.t4  frames as (1, 3, H, W) tensor dumps
    0000_gt.flo            ground truth
    0000_depth.t4          frame-1 depth, rigid scenes only
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .datagen import DataConfig, SamplePair, generate, sample_seed
from .fields import FlowField
from .flowio import read_flo, write_flo
from .tensorops import dump_tensor, load_tensor

log = logging.getLogger(__name__)

MANIFEST = "manifest.yaml"


class DataError(RuntimeError):
    """A dataset directory or one of its files is missing or malformed."""


def sample_files(index: int, rigid: bool) -> dict:
    stem = f"{index:04d}"
    files = {"i1": f"{stem}_i1.t4", "i2": f"{stem}_i2.t4", "gt": f"{stem}_gt.flo"}
    if rigid:
        files["depth"] = f"{stem}_depth.t4"
    return files


def planned_samples(cfg: DataConfig) -> list[dict]:
    """Manifest entries, known before any sample is generated."""
    return [
        {"index": i, "seed": sample_seed(cfg, i), "config_hash": cfg.config_hash(), "files": sample_files(i, cfg.mode == "rigid")}
        for i in range(cfg.count)
    ]


def _image_tensor(img: np.ndarray) -> np.ndarray:
    return img.transpose(2, 0, 1)[None]


def write_sample(out: Path, entry: dict, pair: SamplePair, depth: np.ndarray | None = None) -> None:
    f = entry["files"]
    dump_tensor(_image_tensor(pair.i1), out / f["i1"])
    dump_tensor(_image_tensor(pair.i2), out / f["i2"])
    write_flo(pair.gt, out / f["gt"])
    if depth is not None and "depth" in f:
        dump_tensor(depth[None, None], out / f["depth"])


def write_dataset(cfg: DataConfig, out: Path, manifest: dict) -> list[dict]:
    """Write the manifest first, then every sample in index order."""
    from .datagen import synth_scene

    out.mkdir(parents=True, exist_ok=True)
    entries = planned_samples(cfg)
    manifest = dict(manifest, samples=entries)
    (out / MANIFEST).write_text(yaml.safe_dump(manifest, sort_keys=False))
    for e in entries:
        pair = generate(cfg, e["index"])
        depth = None
        if cfg.mode == "rigid":
            depth = synth_scene(e["seed"], cfg.resolution, cfg.motion_scale, cfg.max_flow_fraction).depth
            e["scene"] = pair.meta["scene"]
        write_sample(out, e, pair, depth)
    (out / MANIFEST).write_text(yaml.safe_dump(manifest, sort_keys=False))
    return entries


@dataclass
class DiskSample:
    name: str
    i1: np.ndarray
    i2: np.ndarray
    gt: FlowField | None
    entry: dict


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataError(f"{root}: no {MANIFEST}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise DataError(f"{path}: unreadable manifest: {e}") from None
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise DataError(f"{path}: manifest has no samples list")
    return data


def _frame(path: Path) -> np.ndarray:
    try:
        t = load_tensor(path)
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from None
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise DataError(f"{path}: expected a (1, 3, H, W) frame, got {tuple(t.shape)}")
    return t[0].numpy().transpose(1, 2, 0)


def read_dataset(root: str | Path) -> list[DiskSample]:
    """Load every listed sample; a missing ground-truth file leaves ``gt`` as None."""
    root = Path(root)
    out = []
    for e in read_manifest(root)["samples"]:
        f = e["files"]
        name = Path(f["i1"]).name.split("_")[0]
        i1, i2 = _frame(root / f["i1"]), _frame(root / f["i2"])
        gt_path = root / f["gt"]
        gt = None
        if gt_path.is_file():
            try:
                gt = read_flo(gt_path)
            except ValueError as err:
                raise DataError(str(err)) from None
        else:
            log.warning("%s: ground truth %s missing", name, gt_path.name)
        out.append(DiskSample(name, i1, i2, gt, e))
    return out


def pairs_from_disk(root: str | Path) -> list[SamplePair]:
    """Samples with ground truth, as training pairs."""
    pairs = []
    for s in read_dataset(root):
        if s.gt is None:
            continue
        pairs.append(SamplePair(s.i1, s.i2, s.gt, dict(s.entry)))
    if not pairs:
        raise DataError(f"{root}: no samples with ground truth")
    return pairs
