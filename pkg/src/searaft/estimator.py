"""scikit-learn style wrapper around the trainer and the network.

``X`` holds frame pairs as an ``(N, 2, H, W, 3)`` array in ``[0, 1]``; ``y``
holds ground-truth flow as ``(N, H, W, 2)`` with NaN marking invalid pixels.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .cli import infer_flow
from .datagen import DataConfig, SamplePair
from .fields import FlowField
from .loss import LossConfig
from .metrics import aggregate, evaluate
from .model import ModelConfig
from .trainer import SampleStore, TrainConfig, train


def _check_pairs(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[4] != 3:
        raise ValueError(f"X must be (N, 2, H, W, 3) frame pairs, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X holds no samples")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


def _check_flow(y, X) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.shape != (X.shape[0], X.shape[2], X.shape[3], 2):
        raise ValueError(f"y must be (N, H, W, 2) matching X, got shape {y.shape}")
    return y


def _field(flow: np.ndarray) -> FlowField:
    valid = np.isfinite(flow).all(axis=-1)
    return FlowField(np.where(valid[..., None], flow, 0.0).astype(np.float32), valid)


class FlowEstimator(BaseEstimator, RegressorMixin):
    """Trains the recurrent flow network on in-memory frame pairs.

    ``score`` returns the negative average endpoint error, so larger is better.
    """

    def __init__(
        self,
        steps=2000,
        batch=8,
        lr=4e-4,
        loss="mol",
        iters=4,
        iters_inference=12,
        direct_init=True,
        feature_dim=64,
        hidden_dim=64,
        num_blocks=2,
        seed=0,
    ):
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.loss = loss
        self.iters = iters
        self.iters_inference = iters_inference
        self.direct_init = direct_init
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.seed = seed

    def _config(self, count, resolution) -> TrainConfig:
        model = ModelConfig(
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            context_dim=self.hidden_dim,
            iters=self.iters,
            iters_inference=self.iters_inference,
            num_blocks=self.num_blocks,
            direct_init=self.direct_init,
        )
        return TrainConfig(
            steps=self.steps,
            batch=self.batch,
            lr=self.lr,
            seed=self.seed,
            loss=LossConfig(self.loss),
            model=model,
            data=DataConfig(count=count, resolution=resolution),
        )

    def fit(self, X, y):
        X = _check_pairs(X)
        y = _check_flow(y, X)
        if X.shape[2] % 8 or X.shape[3] % 8:
            raise ValueError(f"frame extents {X.shape[2:4]} must be multiples of 8")
        cfg = self._config(X.shape[0], X.shape[2:4])
        pairs = [SamplePair(x[0], x[1], _field(f)) for x, f in zip(X, y)]
        result = train(cfg, store=SampleStore(cfg.data, pairs))
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, n_iters=None):
        check_is_fitted(self, "model_")
        X = _check_pairs(X)
        n_iters = self.iters_inference if n_iters is None else n_iters
        i1 = torch.from_numpy(X[:, 0].transpose(0, 3, 1, 2).copy())
        i2 = torch.from_numpy(X[:, 1].transpose(0, 3, 1, 2).copy())
        flow = infer_flow(self.model_, i1, i2, n_iters)
        return flow.numpy().transpose(0, 2, 3, 1)

    def score(self, X, y, sample_weight=None):
        X = _check_pairs(X)
        y = _check_flow(y, X)
        pred = self.predict(X)
        reports = [evaluate(p, _field(t)) for p, t in zip(pred, y)]
        return -aggregate(reports).epe
