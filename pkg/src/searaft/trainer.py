"""Optimization loop, checkpoints, and the ablation harness."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .archive import load_archive, save_archive
from .config import config_hash, from_dict, merge, to_dict
from .datagen import DataConfig, generate
from .loss import LossConfig, LossKind, prediction_loss, sequence_loss
from .metrics import MetricReport, aggregate, evaluate
from .model import SEARAFT, ModelConfig
from .fields import FlowField

log = logging.getLogger(__name__)


class Schedule(str, Enum):
    CONSTANT = "constant"
    ONE_CYCLE = "one_cycle"


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 4e-4
    lr_schedule: Schedule = Schedule.ONE_CYCLE
    clip_norm: float = 1.0
    weight_decay: float = 1e-5
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    # random flips/transposes of each training pair, flow transformed to match
    augment: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_data: DataConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", Schedule(self.lr_schedule))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("batch, lr and clip_norm must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0")

    def model_config(self) -> ModelConfig:
        """Model settings with the scale parameterization the loss needs."""
        kind = self.loss.kind
        return replace(
            self.model,
            beta_range=self.loss.beta_range,
            free_beta1=kind is LossKind.NAIVE_MOL,
        )

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return from_dict(cls, d)

    def hash(self) -> str:
        return config_hash(self)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def optimizer_step(
    weights: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One adaptive-moment update in place, with decoupled weight decay.

    Returns False (and counts the skip) when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != weights[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, weight {tuple(weights[name].shape)}")
        if not torch.isfinite(g).all():
            state.skipped += 1
            return False
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            w = weights[name]
            m = state.m.setdefault(name, torch.zeros_like(w))
            v = state.v.setdefault(name, torch.zeros_like(w))
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            update = (m / c1) / (torch.sqrt(v / c2) + eps)
            if weight_decay:
                w.mul_(1 - lr * weight_decay)
            w.sub_(lr * update)
    return True


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant, or one-cycle: 5% linear warmup from lr/25, then linear decay toward 0."""
    if cfg.lr_schedule is Schedule.CONSTANT or cfg.steps <= 1:
        return cfg.lr
    warm = max(1, int(0.05 * cfg.steps))
    if step < warm:
        return cfg.lr * (0.04 + 0.96 * step / warm)
    frac = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * max(1.0 - frac, 1e-3)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class SampleStore:
    """A generated corpus held as stacked tensors."""

    def __init__(self, cfg: DataConfig, pairs=None):
        self.cfg = cfg
        pairs = list(pairs) if pairs is not None else [generate(cfg, i) for i in range(cfg.count)]
        self.pairs = pairs
        self.i1 = torch.from_numpy(np.stack([p.i1 for p in pairs]).transpose(0, 3, 1, 2).copy())
        self.i2 = torch.from_numpy(np.stack([p.i2 for p in pairs]).transpose(0, 3, 1, 2).copy())
        self.flow = torch.from_numpy(np.stack([p.gt.vectors for p in pairs]).transpose(0, 3, 1, 2).copy())
        self.valid = torch.from_numpy(np.stack([p.gt.valid for p in pairs]).astype(np.float32))

    def __len__(self):
        return len(self.pairs)

    def batch_indices(self, seed: int, step: int, batch: int) -> np.ndarray:
        """Fixed function of (seed, step): the data order never depends on history."""
        rng = np.random.default_rng([seed, step, 0xDA7A])
        return rng.choice(len(self), size=batch, replace=batch > len(self))

    def batch(self, idx):
        idx = torch.as_tensor(idx)
        return self.i1[idx], self.i2[idx], self.flow[idx], self.valid[idx]


def dihedral(i1, i2, flow, valid, codes):
    """Apply one of 8 flip/transpose combinations per sample.

    Bit 0 flips x, bit 1 flips y, bit 2 transposes (square frames only);
    flow components change sign and swap along with the pixels.
    """
    out = [[], [], [], []]
    square = i1.shape[2] == i1.shape[3]
    for k, code in enumerate(codes):
        a, b, f, v = i1[k], i2[k], flow[k].clone(), valid[k]
        if code & 1:
            a, b, f, v = a.flip(-1), b.flip(-1), f.flip(-1), v.flip(-1)
            f[0] = -f[0]
        if code & 2:
            a, b, f, v = a.flip(-2), b.flip(-2), f.flip(-2), v.flip(-2)
            f[1] = -f[1]
        if code & 4 and square:
            a, b, f, v = a.transpose(-1, -2), b.transpose(-1, -2), f.transpose(-1, -2).flip(0), v.transpose(-1, -2)
        for lst, t in zip(out, (a, b, f, v)):
            lst.append(t)
    return tuple(torch.stack(lst).contiguous() for lst in out)


def augment_codes(seed: int, step: int, batch: int) -> np.ndarray:
    return np.random.default_rng([seed, step, 0xA06]).integers(0, 8, size=batch)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    weights: dict[str, torch.Tensor]
    adam: AdamState
    step: int
    config: TrainConfig

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def save(self, path) -> None:
        tensors = {f"model.{k}": v for k, v in self.weights.items()}
        tensors.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        meta = {
            "step": self.step,
            "adam_step": self.adam.step,
            "skipped": self.adam.skipped,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "model_config": to_dict(self.config.model_config()),
        }
        save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path) -> Checkpoint:
        tensors, meta = load_archive(path)
        cfg = TrainConfig.from_dict(meta["config"])
        pick = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}  # noqa: E731
        adam = AdamState(pick("adam.m."), pick("adam.v."), meta["adam_step"], meta["skipped"])
        return cls(pick("model."), adam, meta["step"], cfg)

    def build_model(self) -> SEARAFT:
        model = SEARAFT(self.config.model_config())
        model.load_weights(self.weights)
        return model


def load_model(path) -> SEARAFT:
    """Model from a training checkpoint or a bare weight archive."""
    tensors, meta = load_archive(path)
    if "config" in meta:
        return Checkpoint.load(path).build_model()
    return SEARAFT.load(path)[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SEARAFT
    checkpoint: Checkpoint
    history: list[dict]
    evals: list[tuple[int, MetricReport]]
    dead_parameters: list[str]


def iteration_losses(model: SEARAFT, preds, cfg: LossConfig, gt, valid) -> list[torch.Tensor]:
    """Per-prediction losses in order; the constant zero start is left out without direct init."""
    start = 0 if model.config.direct_init else 1
    return [prediction_loss(cfg, p.flow, p.mol, gt, valid) for p in preds[start:]]


@torch.no_grad()
def evaluate_model(model: SEARAFT, store: SampleStore, n_iters: int, batch: int = 16) -> tuple[MetricReport, list[float]]:
    """Aggregate metrics of the final prediction, and mean EPE per iteration."""
    reports = []
    per_iter = np.zeros(n_iters + 1)
    weight = 0
    for s in range(0, len(store), batch):
        idx = list(range(s, min(s + batch, len(store))))
        i1, i2, gt, valid = store.batch(idx)
        preds = model(i1, i2, n_iters)
        for j, k in enumerate(idx):
            truth = store.pairs[k].gt
            for it, p in enumerate(preds):
                f = p.flow[j].numpy().transpose(1, 2, 0)
                r = evaluate(f, truth)
                per_iter[it] += r.epe * r.n_valid
                if it == len(preds) - 1:
                    reports.append(r)
            weight += reports[-1].n_valid
    return aggregate(reports), list(per_iter / weight)


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    init_weights: dict[str, torch.Tensor] | None = None,
    store: SampleStore | None = None,
    eval_store: SampleStore | None = None,
    stop_after: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the optimization loop.

    ``resume`` continues a checkpoint (weights, moments and step); ``init_weights``
    loads weights only and starts fresh moments at step 0. ``stop_after``
    halts early at that step, as an interruption would.
    """
    torch.manual_seed(cfg.seed)
    model = SEARAFT(cfg.model_config(), seed=cfg.seed)
    adam = AdamState()
    start = 0
    if resume is not None:
        if resume.config_hash != cfg.hash():
            raise ValueError("checkpoint was produced by a different configuration")
        model.load_weights(resume.weights)
        adam = copy.deepcopy(resume.adam)
        start = resume.step
    elif init_weights is not None:
        model.load_weights(init_weights)
    store = store or SampleStore(cfg.data)
    if eval_store is None and cfg.eval_every:
        eval_store = SampleStore(cfg.eval_data) if cfg.eval_data else store

    out = Path(out_dir) if out_dir else None
    log_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        new = not (out / "metrics.csv").exists() or resume is None
        log_file = open(out / "metrics.csv", "w" if new else "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(["step", "loss", "epe", "px1", "fl", "wauc"])

    params = dict(model.named_parameters())
    touched = {k: False for k in params}
    history: list[dict] = []
    evals: list[tuple[int, MetricReport]] = []
    initial_loss = None
    over = 0
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    n_iters = cfg.model.iters

    try:
        for step in range(start, end):
            i1, i2, gt, valid = store.batch(store.batch_indices(cfg.seed, step, cfg.batch))
            if cfg.augment:
                i1, i2, gt, valid = dihedral(i1, i2, gt, valid, augment_codes(cfg.seed, step, cfg.batch))
            preds = model(i1, i2, n_iters)
            losses = iteration_losses(model, preds, cfg.loss, gt, valid)
            total = sequence_loss(losses, cfg.loss.gamma)
            model.zero_grad(set_to_none=True)
            total.backward()
            grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
            if step < 10:
                for k, g in grads.items():
                    touched[k] |= bool((g != 0).any())
            gnorm = clip_grad_norm(grads, cfg.clip_norm)
            applied = optimizer_step(params, grads, adam, learning_rate(cfg, step), cfg.weight_decay)

            value = total.item()
            with torch.no_grad():
                d = (preds[-1].flow - gt).norm(dim=1)
                batch_epe = float((d * valid).sum() / valid.sum())
            rec = {
                "step": step,
                "loss": value,
                "final_loss": losses[-1].item(),
                "epe": batch_epe,
                "grad_norm": gnorm,
                "applied": applied,
            }
            history.append(rec)
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f epe %.3f", step, value, batch_epe)

            if initial_loss is None:
                initial_loss = value
            over = over + 1 if (not math.isfinite(value) or value > 10 * abs(initial_loss)) else 0
            if over >= 100:
                raise DivergenceError(
                    f"loss above 10x its initial value ({initial_loss:.4g}) for 100 steps, last {value:.4g} at step {step}"
                )

            report = None
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                report, _ = evaluate_model(model, eval_store, n_iters)
                evals.append((step + 1, report))
            if log_file:
                row = [step, f"{value:.8g}"]
                row += [f"{report.epe:.6g}", f"{report.px1:.6g}", f"{report.fl_all:.6g}", f"{report.wauc:.6g}"] if report else ["", "", "", ""]
                writer.writerow(row)
                log_file.flush()
            if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _snapshot(model, adam, step + 1, cfg).save(out / "checkpoint.arc")
    finally:
        if log_file:
            log_file.close()

    ckpt = _snapshot(model, adam, max(end, start), cfg)
    if out:
        ckpt.save(out / "checkpoint.arc")
    dead = [k for k, t in touched.items() if not t] if end - start > 0 and start == 0 else []
    return TrainResult(model, ckpt, history, evals, dead)


def _snapshot(model: SEARAFT, adam: AdamState, step: int, cfg: TrainConfig) -> Checkpoint:
    weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(weights, copy.deepcopy(adam), step, cfg)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

LOSS_DESIGN = {
    LossKind.MOL: "Mixture-of-Laplace",
    LossKind.NAIVE_LAPLACE: "Naive Single Laplace",
    LossKind.NAIVE_MOL: "Naive Mixture-of-Laplace",
    LossKind.L1: "L1",
    LossKind.MOG: "Mixture-of-Gaussian",
}

TABLE_COLUMNS = ["arm", "seed", "Init.", "#blocks", "Loss Design", "EPE", "final_loss", "config_hash"]


@dataclass(frozen=True)
class Arm:
    name: str
    delta: dict = field(default_factory=dict)


def apply_delta(base: TrainConfig, delta: dict) -> TrainConfig:
    return TrainConfig.from_dict(merge(base.to_dict(), delta))


def config_diff(a: TrainConfig, b: TrainConfig) -> set[str]:
    """Dotted paths of fields whose values differ."""

    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            p = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                out.update(flat(v, p))
            else:
                out[p] = v
        return out

    fa, fb = flat(a.to_dict()), flat(b.to_dict())
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


TABLE5_ARMS = [
    Arm("w/o Direct Reg.", {"model.direct_init": False}),
    Arm("Naive Single Laplace", {"loss.kind": "naive_laplace"}),
    Arm("Naive Mixture-of-Laplace", {"loss.kind": "naive_mol"}),
    Arm("L1", {"loss.kind": "l1"}),
    Arm("Gaussian", {"loss.kind": "mog"}),
    Arm("More ConvNeXt Blocks", {"model.num_blocks": 4}),
]


@dataclass
class AblationRow:
    arm: str
    seed: int
    config: TrainConfig
    report: MetricReport
    result: TrainResult

    def as_dict(self) -> dict:
        cfg = self.config
        return {
            "arm": self.arm,
            "seed": cfg.seed,
            "Init.": "yes" if cfg.model.direct_init else "no",
            "#blocks": cfg.model.num_blocks,
            "Loss Design": LOSS_DESIGN[cfg.loss.kind],
            "EPE": self.report.epe,
            "final_loss": self.result.history[-1]["final_loss"] if self.result.history else float("nan"),
            "config_hash": cfg.hash(),
        }


def ablate(
    base: TrainConfig,
    arms: list[Arm],
    seeds: list[int] | None = None,
    eval_data: DataConfig | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train the base configuration and every arm on a shared data stream per seed.

    Each arm differs from the base only by its delta; held-out metrics come
    from ``eval_data`` (the training corpus when omitted).
    """
    seeds = [base.seed] if seeds is None else seeds
    rows = []
    for seed in seeds:
        seeded = replace(base, seed=seed)
        train_store = SampleStore(seeded.data)
        held = SampleStore(eval_data) if eval_data else train_store
        for arm in [Arm("base")] + list(arms):
            cfg = apply_delta(seeded, arm.delta)
            changed = config_diff(seeded, cfg)
            expected = {k for k in _flatten_keys(arm.delta)}
            if changed - expected:
                raise ValueError(f"arm {arm.name!r} changes unexpected fields: {sorted(changed - expected)}")
            sub = Path(out_dir) / f"{_slug(arm.name)}-s{seed}" if out_dir else None
            res = train(cfg, sub, store=train_store)
            report, _ = evaluate_model(res.model, held, cfg.model.iters)
            rows.append(AblationRow(arm.name, seed, cfg, report, res))
    return rows


def _flatten_keys(delta: dict, prefix="") -> list[str]:
    keys = []
    for k, v in delta.items():
        p = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            keys += _flatten_keys(v, p)
        else:
            keys.append(p)
    return keys


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_")


def ablation_table(rows: list[AblationRow]) -> list[dict]:
    return [r.as_dict() for r in rows]


def format_ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'arm':<26}{'seed':>5}  {'Init.':<6}{'#blocks':>8}  {'Loss Design':<26}{'EPE':>9}"]
    for r in rows:
        d = r.as_dict()
        lines.append(
            f"{d['arm']:<26}{d['seed']:>5}  {d['Init.']:<6}{d['#blocks']:>8}  {d['Loss Design']:<26}{d['EPE']:>9.4f}"
        )
    lines.append("RAFT GRU arm: not implemented (ConvGRU cell out of scope)")
    return "\n".join(lines)


def flow_field_from_batch(flow: torch.Tensor, k: int) -> FlowField:
    return FlowField.from_tensor(flow[k])
