"""Command-line interface: ``searaft gen|train|infer|eval|ablate``.

Every command reads an optional YAML config, applies flag overrides on top,
writes ``manifest.yaml`` into its run directory, and only then starts work.
Without ``--out`` the run directory is ``$SEARAFT_OUTPUT_ROOT/<command>-<hash>``
(``./runs`` when the variable is unset).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
import yaml

from . import __version__
from .archive import ArchiveError
from .config import ConfigError, config_hash, from_dict, load_yaml_config, merge, to_dict
from .datagen import DataConfig
from .dataset import DataError, pairs_from_disk, read_dataset, write_dataset
from .fields import FlowField
from .flowio import flow_to_color, read_image, write_flo, write_ppm
from .metrics import aggregate, error_map, error_map_image, evaluate, reports_to_csv, reports_to_text
from .model import DOWNSAMPLE, SEARAFT
from .tensorops import ShapeError, load_tensor
from .trainer import Arm, Checkpoint, DivergenceError, SampleStore, TrainConfig, ablate, ablation_table, format_ablation_table, load_model, train

log = logging.getLogger("searaft")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "SEARAFT_OUTPUT_ROOT"


# ---------------------------------------------------------------------------
# per-command configuration schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenRun:
    data: DataConfig = field(default_factory=DataConfig)


@dataclass(frozen=True)
class TrainRun:
    train: TrainConfig = field(default_factory=TrainConfig)
    resume: str | None = None
    init_from: str | None = None
    data_dir: str | None = None
    log_every: int = 50


@dataclass(frozen=True)
class InferRun:
    checkpoint: str = ""
    image1: str = ""
    image2: str = ""
    iters: int | None = None
    downsample: int = 1


@dataclass(frozen=True)
class EvalRun:
    checkpoint: str = ""
    dataset: str = ""
    iters: tuple[int, ...] = ()
    downsample: int = 1
    error_maps: bool = False
    oracle: bool = False


@dataclass(frozen=True)
class ArmSpec:
    name: str = ""
    delta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AblateRun:
    base: TrainConfig = field(default_factory=TrainConfig)
    arms: tuple[ArmSpec, ...] = ()
    seeds: tuple[int, ...] = (0,)
    eval_data: DataConfig | None = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(cls, path: str | None, overrides: dict):
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if path:
        if not Path(path).is_file():
            raise ConfigError("config file not found", path)
        return load_yaml_config(cls, path, overrides)
    return from_dict(cls, merge({}, overrides))


def _run_dir(args, command: str, run) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-{config_hash(run)}"


def _write_manifest(out: Path, command: str, args, run, extra: dict | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": args.config,
        "seed": _seed_of(run),
        "config_hash": config_hash(run),
        "output_dir": str(out),
        "argv": sys.argv[1:],
        "config": to_dict(run),
    }
    manifest.update(extra or {})
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    return manifest


def _seed_of(run) -> int | None:
    for path in ("data.seed", "train.seed", "base.seed"):
        obj = run
        for part in path.split("."):
            obj = getattr(obj, part, None)
        if obj is not None:
            return obj
    return None


def read_frame(path: str | Path) -> torch.Tensor:
    """A (1, 3, H, W) float frame from a tensor dump or an image file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    if path.suffix == ".t4":
        try:
            t = load_tensor(path)
        except ValueError as e:
            raise DataError(str(e)) from None
        if t.dim() != 4 or t.shape[:2] != (1, 3):
            raise DataError(f"{path}: expected a (1, 3, H, W) frame, got {tuple(t.shape)}")
        return t
    try:
        img = read_image(path)
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    return torch.from_numpy(img.transpose(2, 0, 1).copy())[None]


def infer_flow(model: SEARAFT, i1: torch.Tensor, i2: torch.Tensor, iters: int, downsample: int = 1) -> torch.Tensor:
    """Full-size (B, 2, H, W) flow for frames of any extent.

    With ``downsample`` d the frames are shrunk by d, padded to multiples of 8
    by edge replication, and the cropped flow is bilinearly enlarged back to
    the input extent with its vectors multiplied by d.
    """
    if i1.shape != i2.shape:
        raise ShapeError(f"frame sizes differ: {tuple(i1.shape[2:])} vs {tuple(i2.shape[2:])}")
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    dtype = next(model.parameters()).dtype
    i1, i2 = i1.to(dtype), i2.to(dtype)
    h, w = i1.shape[2:]
    if downsample > 1:
        size = (max(1, round(h / downsample)), max(1, round(w / downsample)))
        i1 = F.interpolate(i1, size=size, mode="bilinear", align_corners=False, antialias=True)
        i2 = F.interpolate(i2, size=size, mode="bilinear", align_corners=False, antialias=True)
    sh, sw = i1.shape[2:]
    ph, pw = (-sh) % DOWNSAMPLE, (-sw) % DOWNSAMPLE
    if ph or pw:
        i1 = F.pad(i1, (0, pw, 0, ph), mode="replicate")
        i2 = F.pad(i2, (0, pw, 0, ph), mode="replicate")
    flow = model.predict(i1, i2, iters)[:, :, :sh, :sw]
    if downsample > 1:
        flow = F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False) * downsample
    return flow


def _load_model(path: str) -> SEARAFT:
    if not path:
        raise ConfigError("a checkpoint is required", "checkpoint")
    if not Path(path).is_file():
        raise DataError(f"{path}: checkpoint not found")
    try:
        return load_model(path)
    except (ArchiveError, KeyError) as e:
        raise DataError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    over = {
        "data.mode": args.mode,
        "data.count": args.count,
        "data.seed": args.seed,
        "data.resolution": list(args.resolution) if args.resolution else None,
        "data.max_disp": args.max_disp,
        "data.motion_scale": args.motion_scale,
    }
    run = _load(GenRun, args.config, over)
    out = _run_dir(args, "gen", run)
    manifest = _write_manifest(out, "gen", args, run)
    entries = write_dataset(run.data, out, manifest)
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    over = {
        "train.steps": args.steps,
        "train.seed": args.seed,
        "train.batch": args.batch,
        "train.lr": args.lr,
        "resume": args.resume,
        "init_from": args.init_from,
        "data_dir": args.data_dir,
    }
    run = _load(TrainRun, args.config, over)
    if run.resume and run.init_from:
        raise ConfigError("use either resume or init_from, not both", "resume")
    cfg = run.train
    out = _run_dir(args, "train", run)
    _write_manifest(out, "train", args, run, {"train_config_hash": cfg.hash()})
    (out / "config.yaml").write_text(yaml.safe_dump(to_dict(run), sort_keys=False))

    resume = init = None
    if run.resume:
        if not Path(run.resume).is_file():
            raise DataError(f"{run.resume}: checkpoint not found")
        resume = Checkpoint.load(run.resume)
    if run.init_from:
        init = _load_model(run.init_from).state_dict()
    store = SampleStore(cfg.data, pairs_from_disk(run.data_dir)) if run.data_dir else None
    try:
        res = train(cfg, out, resume=resume, init_weights=init, store=store, log_every=run.log_every)
    except ValueError as e:
        if "different configuration" in str(e):
            raise ConfigError(str(e), "resume") from None
        raise
    last = res.history[-1] if res.history else None
    msg = f"checkpoint at step {res.checkpoint.step} -> {out / 'checkpoint.arc'}"
    if last:
        msg += f" (loss {last['loss']:.4f}, batch EPE {last['epe']:.3f})"
    if res.dead_parameters:
        log.warning("parameters without gradient in the first 10 steps: %s", ", ".join(res.dead_parameters))
    print(msg)
    return EXIT_OK


def cmd_infer(args) -> int:
    over = {
        "checkpoint": args.checkpoint,
        "image1": args.image1,
        "image2": args.image2,
        "iters": args.iters,
        "downsample": args.downsample,
    }
    run = _load(InferRun, args.config, over)
    if not run.image1 or not run.image2:
        raise ConfigError("two input frames are required", "image1")
    model = _load_model(run.checkpoint)
    i1, i2 = read_frame(run.image1), read_frame(run.image2)
    if i1.shape != i2.shape:
        raise DataError(f"frame sizes differ: {tuple(i1.shape[2:])} vs {tuple(i2.shape[2:])}")
    out = _run_dir(args, "infer", run)
    _write_manifest(out, "infer", args, run)
    iters = model.config.iters_inference if run.iters is None else run.iters
    if iters > model.config.iters_inference:
        raise ConfigError(f"at most {model.config.iters_inference} iterations are supported", "iters")
    flow = infer_flow(model, i1, i2, iters, run.downsample)
    field = FlowField.from_tensor(flow)
    write_flo(field, out / "flow.flo")
    write_ppm(flow_to_color(field), out / "flow.ppm")
    print(f"flow {field.shape[1]}x{field.shape[0]} -> {out / 'flow.flo'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    over = {
        "checkpoint": args.checkpoint,
        "dataset": args.dataset or args.dataset_opt,
        "iters": list(args.iters) if args.iters else None,
        "downsample": args.downsample,
        "error_maps": True if args.error_maps else None,
        "oracle": True if args.oracle else None,
    }
    run = _load(EvalRun, args.config, over)
    if not run.dataset:
        raise ConfigError("a dataset directory is required", "dataset")
    if not run.oracle and not run.checkpoint:
        raise ConfigError("a checkpoint is required unless oracle is set", "checkpoint")
    samples = read_dataset(run.dataset)
    model = None if run.oracle else _load_model(run.checkpoint)
    iters_list = list(run.iters) or ([model.config.iters_inference] if model else [0])
    out = _run_dir(args, "eval", run)
    _write_manifest(out, "eval", args, run)

    rows, text = [], []
    skipped = [s.name for s in samples if s.gt is None]
    for name in skipped:
        log.warning("%s: no ground truth, skipped", name)
    for iters in iters_list:
        per = []
        for s in samples:
            if s.gt is None:
                continue
            if model is None:
                pred = s.gt.vectors
            else:
                i1 = torch.from_numpy(s.i1.transpose(2, 0, 1).copy())[None]
                i2 = torch.from_numpy(s.i2.transpose(2, 0, 1).copy())[None]
                pred = infer_flow(model, i1, i2, iters, run.downsample)[0].numpy().transpose(1, 2, 0)
            per.append(evaluate(pred, s.gt, label=f"{s.name}@{iters}"))
            if run.error_maps:
                write_ppm(error_map_image(error_map(pred, s.gt)), out / f"{s.name}_err_it{iters}.ppm")
        if not per:
            raise DataError(f"{run.dataset}: no sample has ground truth")
        agg = aggregate(per, label=f"all@{iters}")
        rows += per + [agg]
        text.append(reports_to_text(per + [agg]))
    (out / "metrics.csv").write_text(reports_to_csv(rows))
    summary = "\n\n".join(text) + f"\n\nskipped (no ground truth): {len(skipped)}\n"
    (out / "metrics.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    over = {"base.steps": args.steps, "seeds": list(args.seeds) if args.seeds else None}
    run = _load(AblateRun, args.config, over)
    out = _run_dir(args, "ablate", run)
    _write_manifest(out, "ablate", args, run)
    arms = [Arm(a.name, a.delta) for a in run.arms]
    rows = ablate(run.base, arms, list(run.seeds), run.eval_data, out)
    table = ablation_table(rows)
    cols = list(table[0].keys())
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in table]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    text = format_ablation_table(rows)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="searaft", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config; flags override its values")
        sp.add_argument("--out", help="run directory (default: $%s/<command>-<hash>)" % OUTPUT_ROOT_ENV)
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--mode", choices=["affine", "rigid"])
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--max-disp", type=float)
    g.add_argument("--motion-scale", type=float)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="continue a training checkpoint")
    t.add_argument("--init-from", help="load weights only, fresh optimizer state")
    t.add_argument("--data-dir", help="train on a generated dataset directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate flow between two frames")
    common(i)
    i.add_argument("checkpoint", nargs="?")
    i.add_argument("image1", nargs="?")
    i.add_argument("image2", nargs="?")
    i.add_argument("--iters", type=int)
    i.add_argument("--downsample", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    common(e)
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("dataset", nargs="?")
    e.add_argument("--dataset", dest="dataset_opt", metavar="DIR", help="dataset directory (alternative to the positional)")
    e.add_argument("--iters", type=int, nargs="+")
    e.add_argument("--downsample", type=int)
    e.add_argument("--error-maps", action="store_true")
    e.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare configuration arms")
    common(a)
    a.add_argument("--steps", type=int)
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
