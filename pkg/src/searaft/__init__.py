"""Recurrent all-pairs optical flow with mixture-of-Laplace training, at desk scale."""

from .corr import CorrPyramid, LookupConfig, build_pyramid, lookup
from .fields import FlowField, FlowPrediction, MoLParams
from .loss import LossConfig, LossKind, mol_nll, sequence_loss
from .model import SEARAFT, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "CorrPyramid",
    "FlowField",
    "FlowPrediction",
    "LookupConfig",
    "LossConfig",
    "LossKind",
    "ModelConfig",
    "MoLParams",
    "SEARAFT",
    "build_pyramid",
    "lookup",
    "mol_nll",
    "sequence_loss",
]
