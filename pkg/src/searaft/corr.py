"""All-pairs correlation pyramid and fixed-radius lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .tensorops import ShapeError, Tensor, avg_pool2, bilinear_sample, check_tensor4


@dataclass(frozen=True)
class LookupConfig:
    radius: int = 4
    levels: int = 4

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"lookup radius must be >= 0, got {self.radius}")
        if self.levels < 1:
            raise ValueError(f"need at least one pyramid level, got {self.levels}")

    @property
    def channels(self) -> int:
        """Length of the raw motion feature per pixel."""
        return self.levels * (2 * self.radius + 1) ** 2


@dataclass(frozen=True)
class CorrPyramid:
    """Correlation volumes ``V_k`` for ``k = 0 .. L-1``.

    ``levels[k]`` has shape ``(B * h * w, 1, h_k, w_k)``: one 2-D similarity
    map per source pixel, against frame-2 features pooled ``k`` times by 2.
    """

    levels: list[Tensor]
    feature_dim: int
    batch: int
    height: int
    width: int

    def volume(self, k: int) -> Tensor:
        """Level ``k`` reshaped to ``(B, h, w, h_k, w_k)``."""
        v = self.levels[k]
        return v.view(self.batch, self.height, self.width, *v.shape[2:])

    def num_entries(self) -> int:
        return sum(v.numel() for v in self.levels)


def build_pyramid(f1: Tensor, f2: Tensor, levels: int = 4) -> CorrPyramid:
    """Dot products between every frame-1 feature and every pooled frame-2 feature.

    Entries are scaled by ``1 / sqrt(D)``. Level ``k + 1`` pools the frame-2
    features of level ``k`` by 2 (replicate padding on odd extents).
    """
    check_tensor4(f1, "f1")
    check_tensor4(f2, "f2")
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    b, d, h, w = f1.shape
    scale = 1.0 / math.sqrt(d)
    src = f1.reshape(b, d, h * w).transpose(1, 2)  # (B, hw, D)
    out = []
    target = f2
    for k in range(levels):
        if k:
            target = avg_pool2(target, 2)
        hk, wk = target.shape[2:]
        corr = torch.bmm(src, target.reshape(b, d, hk * wk)) * scale
        out.append(corr.reshape(b * h * w, 1, hk, wk))
    return CorrPyramid(out, d, b, h, w)


def window_offsets(radius: int, dtype=torch.float32) -> Tensor:
    """``(2r+1, 2r+1, 2)`` grid of ``(dx, dy)`` offsets, row-major (dy outer)."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack((dx, dy), dim=-1)


def lookup(pyr: CorrPyramid, flow: Tensor, cfg: LookupConfig | None = None) -> Tensor:
    """Sample a ``(2r+1)^2`` window around each pixel's correspondence on every level.

    Parameters
    ----------
    flow : (B, 2, h, w) tensor in feature-resolution pixels.

    Returns
    -------
    (B, L * (2r+1)^2, h, w) tensor, channels ordered level-major then
    window row-major.
    """
    cfg = cfg or LookupConfig(levels=len(pyr.levels))
    check_tensor4(flow, "flow")
    b, _, h, w = flow.shape
    if (b, h, w) != (pyr.batch, pyr.height, pyr.width) or flow.shape[1] != 2:
        raise ShapeError(
            f"flow {tuple(flow.shape)} does not match pyramid base ({pyr.batch}, 2, {pyr.height}, {pyr.width})"
        )
    if cfg.levels > len(pyr.levels):
        raise ValueError(f"lookup wants {cfg.levels} levels, pyramid has {len(pyr.levels)}")
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype), torch.arange(w, dtype=flow.dtype), indexing="ij"
    )
    base = torch.stack((xs, ys), dim=0).unsqueeze(0)  # (1, 2, h, w)
    centers = (base + flow).permute(0, 2, 3, 1).reshape(b * h * w, 1, 1, 2)
    win = window_offsets(cfg.radius, flow.dtype).view(1, 2 * cfg.radius + 1, 2 * cfg.radius + 1, 2)
    feats = []
    for k in range(cfg.levels):
        coords = centers / 2**k + win
        sampled = bilinear_sample(pyr.levels[k], coords)  # (B*h*w, 1, 2r+1, 2r+1)
        feats.append(sampled.reshape(b, h, w, -1))
    return torch.cat(feats, dim=-1).permute(0, 3, 1, 2).contiguous()
