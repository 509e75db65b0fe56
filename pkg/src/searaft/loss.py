"""Training objectives: mixture-of-Laplace likelihood and its ablations.

All per-pixel losses take batched tensors:

* ``pred``, ``gt``: ``(B, 2, H, W)`` flow
* scale / mixture parameters: ``(B, 1, H, W)`` (or ``(B, H, W)``)
* ``valid``: ``(B, H, W)`` mask; invalid pixels drop out of sums and normalizer
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch

from .fields import MoLParams

Tensor = torch.Tensor

LOG2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class LossKind(str, Enum):
    MOL = "mol"
    NAIVE_LAPLACE = "naive_laplace"
    NAIVE_MOL = "naive_mol"
    L1 = "l1"
    MOG = "mog"


# scale-parameter interval per loss kind
BETA_RANGE = {
    LossKind.MOL: (0.0, 10.0),
    LossKind.MOG: (0.0, 10.0),
    LossKind.NAIVE_LAPLACE: (-10.0, 10.0),
    LossKind.NAIVE_MOL: (-10.0, 10.0),
    LossKind.L1: (0.0, 10.0),
}


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.MOL
    gamma: float = 0.8
    beta_upper: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.beta_upper <= 0:
            raise ValueError(f"beta_upper must be positive, got {self.beta_upper}")

    @property
    def beta_range(self) -> tuple[float, float]:
        lo, _ = BETA_RANGE[self.kind]
        return (lo if lo == 0.0 else -self.beta_upper, self.beta_upper)


class _BoundedClamp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi):
        ctx.save_for_backward(x)
        ctx.bounds = (lo, hi)
        return x.clamp(lo, hi)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        lo, hi = ctx.bounds
        # descent step is -g: at the lower bound it leaves if g > 0, at the upper if g < 0
        keep = ((x > lo) & (x < hi)) | ((x == lo) & (g <= 0)) | ((x == hi) & (g >= 0))
        return g * keep.to(g.dtype), None, None


def clamp_beta(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]`` with a projected gradient.

    Outside the interval the gradient is zero; on a boundary the component
    that would push a descent step out of the interval is dropped.
    """
    return _BoundedClamp.apply(x, lo, hi)


def _prepare(pred: Tensor, gt: Tensor, valid: Tensor | None, *params: Tensor):
    if pred.shape != gt.shape or pred.dim() != 4 or pred.shape[1] != 2:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} must both be (B, 2, H, W)")
    b, _, h, w = pred.shape
    if valid is None:
        valid = torch.ones(b, h, w, dtype=pred.dtype)
    valid = valid.reshape(b, h, w).to(pred.dtype)
    mask = valid.unsqueeze(1) > 0.5
    if not torch.isfinite(pred).all() or not torch.isfinite(gt[mask.expand_as(gt)]).all():
        raise ValueError("non-finite flow passed to loss")
    out = []
    for p in params:
        p = p.reshape(b, 1, h, w)
        if not torch.isfinite(p).all():
            raise ValueError("non-finite mixture parameter passed to loss")
        out.append(p)
    n = valid.sum()
    if n.item() == 0:
        raise ValueError("loss undefined: no valid pixels")
    # residuals at invalid pixels are zeroed so they cannot poison gradients
    err = torch.where(mask, gt - pred, torch.zeros_like(pred))
    return err, valid, n, out


def _safe_log(x: Tensor) -> Tensor:
    return torch.log(x.clamp_min(torch.finfo(x.dtype).tiny))


def mol_nll(
    pred: Tensor,
    alpha: Tensor,
    beta2: Tensor,
    gt: Tensor,
    valid: Tensor | None = None,
    beta_upper: float = 10.0,
) -> Tensor:
    """Mixture-of-Laplace negative log-likelihood with the first scale fixed at 1.

    Averaged over ``2 * |valid|`` per-direction terms. Each mixture component
    is evaluated in log space and combined by log-sum-exp.
    """
    err, valid, n, (alpha, beta2) = _prepare(pred, gt, valid, alpha, beta2)
    beta2 = clamp_beta(beta2, 0.0, beta_upper)
    a = err.abs()
    log_c1 = _safe_log(alpha) - a - LOG2
    log_c2 = _safe_log(1 - alpha) - a * torch.exp(-beta2) - LOG2 - beta2
    nll = -torch.logsumexp(torch.stack((log_c1, log_c2)), dim=0)
    return (nll * valid.unsqueeze(1)).sum() / (2 * n)


def naive_mol_nll(
    pred: Tensor,
    alpha: Tensor,
    beta1: Tensor,
    beta2: Tensor,
    gt: Tensor,
    valid: Tensor | None = None,
    bound: float = 10.0,
) -> Tensor:
    """Two-Laplace mixture with both log-scales free in ``[-bound, bound]``."""
    err, valid, n, (alpha, beta1, beta2) = _prepare(pred, gt, valid, alpha, beta1, beta2)
    beta1 = clamp_beta(beta1, -bound, bound)
    beta2 = clamp_beta(beta2, -bound, bound)
    a = err.abs()
    log_c1 = _safe_log(alpha) - a * torch.exp(-beta1) - LOG2 - beta1
    log_c2 = _safe_log(1 - alpha) - a * torch.exp(-beta2) - LOG2 - beta2
    nll = -torch.logsumexp(torch.stack((log_c1, log_c2)), dim=0)
    return (nll * valid.unsqueeze(1)).sum() / (2 * n)


def naive_laplace_nll(
    pred: Tensor,
    logb: Tensor,
    gt: Tensor,
    valid: Tensor | None = None,
    bound: float = 10.0,
) -> Tensor:
    """Single Laplace with a shared per-pixel scale ``b = exp(logb)``.

    Per pixel: ``log(2b) + ||e||_1 / (2b)``, averaged over valid pixels.
    """
    err, valid, n, (logb,) = _prepare(pred, gt, valid, logb)
    logb = clamp_beta(logb, -bound, bound)[:, 0]
    l1 = err.abs().sum(1)
    per_pixel = LOG2 + logb + l1 * torch.exp(-logb) / 2
    return (per_pixel * valid).sum() / n


def mog_nll(
    pred: Tensor,
    alpha: Tensor,
    beta2: Tensor,
    gt: Tensor,
    valid: Tensor | None = None,
    beta_upper: float = 10.0,
) -> Tensor:
    """Gaussian counterpart of :func:`mol_nll`: sigma1 = 1, sigma2 = exp(beta2)."""
    err, valid, n, (alpha, beta2) = _prepare(pred, gt, valid, alpha, beta2)
    beta2 = clamp_beta(beta2, 0.0, beta_upper)
    sq = err.pow(2)
    log_c1 = _safe_log(alpha) - sq / 2 - HALF_LOG_2PI
    log_c2 = _safe_log(1 - alpha) - sq * torch.exp(-2 * beta2) / 2 - beta2 - HALF_LOG_2PI
    nll = -torch.logsumexp(torch.stack((log_c1, log_c2)), dim=0)
    return (nll * valid.unsqueeze(1)).sum() / (2 * n)


def l1_loss(pred: Tensor, gt: Tensor, valid: Tensor | None = None) -> Tensor:
    """Mean over valid pixels of ``|e_x| + |e_y|``."""
    err, valid, n, _ = _prepare(pred, gt, valid)
    return (err.abs().sum(1) * valid).sum() / n


def sequence_loss(losses: Sequence[Tensor | float], gamma: float = 0.8):
    """``sum_i gamma^(N - i) * L_i`` for ``i = 0 .. N``, oldest prediction first."""
    if len(losses) == 0:
        raise ValueError("sequence loss over an empty list")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    n = len(losses) - 1
    total = 0.0
    for i, loss in enumerate(losses):
        total = total + gamma ** (n - i) * loss
    return total


def prediction_loss(
    cfg: LossConfig,
    flow: Tensor,
    mol: MoLParams,
    gt: Tensor,
    valid: Tensor | None = None,
) -> Tensor:
    """Loss of one prediction under the configured objective."""
    kind = cfg.kind
    if kind is LossKind.MOL:
        return mol_nll(flow, mol.alpha, mol.beta2, gt, valid, cfg.beta_upper)
    if kind is LossKind.MOG:
        return mog_nll(flow, mol.alpha, mol.beta2, gt, valid, cfg.beta_upper)
    if kind is LossKind.NAIVE_LAPLACE:
        return naive_laplace_nll(flow, mol.beta2, gt, valid, cfg.beta_upper)
    if kind is LossKind.NAIVE_MOL:
        if mol.beta1 is None:
            raise ValueError("naive mixture loss needs a predicted beta1")
        return naive_mol_nll(flow, mol.alpha, mol.beta1, mol.beta2, gt, valid, cfg.beta_upper)
    return l1_loss(flow, gt, valid)
