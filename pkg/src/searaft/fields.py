"""Containers for flow fields and per-pixel mixture parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class FlowField:
    """Dense flow for one image: ``vectors`` is (H, W, 2) as (u, v) in pixels."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"flow vectors must be (H, W, 2), got {self.vectors.shape}")
        if self.valid is None:
            self.valid = np.ones(self.vectors.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.vectors.shape[:2]:
            raise ValueError(f"mask shape {self.valid.shape} does not match flow {self.vectors.shape[:2]}")

    @classmethod
    def dense(cls, vectors) -> FlowField:
        vectors = np.asarray(vectors)
        return cls(vectors, np.ones(vectors.shape[:2], dtype=bool))

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        return cls.dense(np.zeros((height, width, 2), dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])

    def to_tensor(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """``(1, 2, H, W)`` vectors and ``(1, H, W)`` float mask."""
        vec = torch.from_numpy(np.ascontiguousarray(self.vectors.transpose(2, 0, 1))).to(dtype)
        mask = torch.from_numpy(self.valid.astype(np.float32)).to(dtype)
        return vec.unsqueeze(0), mask.unsqueeze(0)

    @classmethod
    def from_tensor(cls, vectors: torch.Tensor, valid: torch.Tensor | None = None) -> FlowField:
        """Build from a ``(2, H, W)`` or ``(1, 2, H, W)`` tensor."""
        if vectors.dim() == 4:
            vectors = vectors[0]
        arr = vectors.detach().cpu().numpy().transpose(1, 2, 0)
        mask = None
        if valid is not None:
            mask = valid.detach().cpu().numpy().reshape(arr.shape[:2]) > 0.5
        return cls(arr, mask)


@dataclass
class MoLParams:
    """Per-pixel mixture parameters as ``(B, 1, H, W)`` tensors.

    ``beta1`` is fixed at zero for the standard mixture and left as ``None``;
    only the unconstrained-mixture ablation carries it.
    """

    alpha: torch.Tensor
    beta2: torch.Tensor
    beta1: torch.Tensor | None = None


@dataclass
class FlowPrediction:
    """One output of the refinement loop: batched ``(B, 2, H, W)`` flow plus mixture."""

    flow: torch.Tensor
    mol: MoLParams
