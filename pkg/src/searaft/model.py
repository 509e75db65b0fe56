"""Recurrent optical-flow network with direct initial-flow regression.

Pipeline for a pair ``(i1, i2)`` of ``(B, 3, H, W)`` images in ``[0, 1]``:

1. a shared feature encoder maps each frame to ``(B, D, H/8, W/8)``;
2. the correlation pyramid is built once from the two feature maps;
3. the context encoder reads the stacked frames and emits the context
   feature, the initial hidden state, and a regressed initial flow with its
   mixture parameters;
4. each refinement step looks up the pyramid at the current flow, encodes
   motion, runs two ConvNeXt blocks, and regresses a flow residual plus new
   mixture parameters;
5. every prediction is convex-upsampled to full resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import tensorops as ops
from .archive import load_archive, save_archive
from .corr import CorrPyramid, LookupConfig, build_pyramid, lookup
from .fields import FlowPrediction, MoLParams
from .loss import clamp_beta

Tensor = torch.Tensor

DOWNSAMPLE = 8


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    hidden_dim: int = 64
    context_dim: int = 64
    motion_dim: int = 128
    iters: int = 4
    iters_inference: int = 12
    levels: int = 4
    radius: int = 4
    downsample: int = DOWNSAMPLE
    num_blocks: int = 2
    direct_init: bool = True
    free_beta1: bool = False
    # off only for end-to-end gradient checks, where finite differences see the skip path
    stop_gradient: bool = True
    beta_range: tuple[float, float] = (0.0, 10.0)
    encoder_widths: tuple[int, int, int] = (32, 48, 64)

    def __post_init__(self):
        if self.downsample != DOWNSAMPLE:
            raise ValueError(f"downsample factor is fixed at {DOWNSAMPLE}")
        for name in ("feature_dim", "hidden_dim", "context_dim", "motion_dim", "levels", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iters < 0 or self.iters_inference < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.motion_dim < 3:
            raise ValueError("motion_dim must exceed the 2 flow channels it carries")
        object.__setattr__(self, "beta_range", tuple(float(b) for b in self.beta_range))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))

    @property
    def lookup(self) -> LookupConfig:
        return LookupConfig(self.radius, self.levels)

    @property
    def info_channels(self) -> int:
        return 3 if self.free_beta1 else 2


@dataclass
class RefineState:
    hidden: Tensor
    context: Tensor
    flow: Tensor
    mol: MoLParams
    iteration: int = 0


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv(nn.Module):
    """Convolution with fan-in scaled uniform initialization."""

    def __init__(self, cin, cout, k, stride=1, padding=None, groups=1, zero_init=False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(cout, cin // groups, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.macs = 0
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            fan_in = cin // groups * k * k
            bound = math.sqrt(6.0 / fan_in)
            nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x):
        if self.groups > 1:
            y = ops.depthwise_conv2d(x, self.weight, self.bias, padding=self.padding)
        else:
            y = ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        self.macs += y.numel() * self.weight[0].numel()
        return y


class ChannelNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return ops.channel_norm(x, self.weight, self.bias)


class Encoder(nn.Module):
    """Six convolutions, three of them stride 2, down to 1/8 resolution."""

    def __init__(self, cin, cout, widths=(32, 48, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.convs = nn.ModuleList(
            [
                Conv(cin, w1, 7, stride=2),
                Conv(w1, w1, 3),
                Conv(w1, w2, 3, stride=2),
                Conv(w2, w2, 3),
                Conv(w2, w3, 3, stride=2),
                Conv(w3, cout, 1),
            ]
        )
        self.norms = nn.ModuleList([ChannelNorm(w) for w in (w1, w2, w3)])

    def forward(self, x):
        c = self.convs
        x = torch.relu(self.norms[0](c[0](x)))
        x = x + torch.relu(c[1](x))
        x = torch.relu(self.norms[1](c[2](x)))
        x = x + torch.relu(c[3](x))
        x = torch.relu(self.norms[2](c[4](x)))
        return c[5](x)


class ConvNeXtBlock(nn.Module):
    """Project ``cin -> dim`` then a residual ConvNeXt unit.

    The unit is depthwise 7x7, channel norm, pointwise 4x expansion, GELU,
    pointwise projection back to ``dim``.
    """

    def __init__(self, cin, dim):
        super().__init__()
        self.proj = Conv(cin, dim, 1)
        self.dw = Conv(dim, dim, 7, groups=dim)
        self.norm = ChannelNorm(dim)
        self.pw1 = Conv(dim, 4 * dim, 1)
        self.pw2 = Conv(4 * dim, dim, 1)

    def forward(self, x):
        x = self.proj(x)
        y = self.pw2(ops.gelu(self.pw1(self.norm(self.dw(x)))))
        return x + y


class MotionEncoder(nn.Module):
    def __init__(self, corr_channels, out_dim):
        super().__init__()
        self.c1 = Conv(corr_channels, 96, 1)
        self.c2 = Conv(96, 64, 3)
        self.f1 = Conv(2, 32, 7)
        self.f2 = Conv(32, 32, 3)
        self.out = Conv(96, out_dim - 2, 3)

    def forward(self, corr, flow):
        c = torch.relu(self.c2(torch.relu(self.c1(corr))))
        f = torch.relu(self.f2(torch.relu(self.f1(flow))))
        m = torch.relu(self.out(ops.concat([c, f])))
        return ops.concat([m, flow])


class Head(nn.Module):
    """Two convolutions; the last one starts at zero."""

    def __init__(self, cin, hidden, cout, k2=3):
        super().__init__()
        self.c1 = Conv(cin, hidden, 3)
        self.c2 = Conv(hidden, cout, k2, zero_init=True)

    def forward(self, x):
        return self.c2(torch.relu(self.c1(x)))


# ---------------------------------------------------------------------------
# convex upsampling
# ---------------------------------------------------------------------------


def convex_upsample(x: Tensor, mask_logits: Tensor, factor: int = DOWNSAMPLE, scale: float = 1.0) -> Tensor:
    """Each fine pixel is a softmax-weighted mix of its 3x3 coarse neighborhood.

    ``mask_logits`` is ``(B, 9 * factor^2, h, w)`` laid out as
    ``(neighbor, sub_row, sub_col)``. Borders replicate the edge cell so that
    constant fields stay constant.
    """
    b, c, h, w = x.shape
    if mask_logits.shape != (b, 9 * factor * factor, h, w):
        raise ops.ShapeError(
            f"mask must be ({b}, {9 * factor * factor}, {h}, {w}), got {tuple(mask_logits.shape)}"
        )
    weights = ops.softmax_group(mask_logits, 9).view(b, 1, 9, factor, factor, h, w)
    padded = torch.nn.functional.pad(x * scale, (1, 1, 1, 1), mode="replicate")
    patches = torch.nn.functional.unfold(padded, 3).view(b, c, 9, 1, 1, h, w)
    up = (weights * patches).sum(2)  # (b, c, f, f, h, w)
    return up.permute(0, 1, 4, 2, 5, 3).reshape(b, c, factor * h, factor * w)


def upsample_flow(coarse: Tensor, mask_logits: Tensor) -> Tensor:
    """Full-resolution flow: convex combination of the 3x3 neighborhood, times 8."""
    return convex_upsample(coarse, mask_logits, DOWNSAMPLE, float(DOWNSAMPLE))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class SEARAFT(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fnet = Encoder(3, cfg.feature_dim, cfg.encoder_widths)
            self.cnet = Encoder(6 if cfg.direct_init else 3, cfg.context_dim, cfg.encoder_widths)
            self.hidden_head = Conv(cfg.context_dim, cfg.hidden_dim, 3)
            if cfg.direct_init:
                self.init_head = Head(cfg.context_dim, 2 * cfg.hidden_dim, 2 + cfg.info_channels)
            self.motion = MotionEncoder(cfg.lookup.channels, cfg.motion_dim)
            cin = cfg.hidden_dim + cfg.motion_dim + cfg.context_dim
            self.blocks = nn.ModuleList([ConvNeXtBlock(cin, cfg.hidden_dim) for _ in range(cfg.num_blocks)])
            self.flow_head = Head(cfg.hidden_dim, 2 * cfg.hidden_dim, 2 + cfg.info_channels)
            self.mask_head = Head(cfg.hidden_dim, 2 * cfg.hidden_dim, 9 * DOWNSAMPLE**2, k2=1)

    # -- encoders ----------------------------------------------------------

    @staticmethod
    def _check_images(*images: Tensor):
        shape = images[0].shape
        for im in images:
            ops.check_tensor4(im, "image")
            if im.shape != shape:
                raise ops.ShapeError(f"image shapes differ: {tuple(im.shape)} vs {tuple(shape)}")
        if shape[1] != 3:
            raise ops.ShapeError(f"images must have 3 channels, got {shape[1]}")
        if shape[2] % DOWNSAMPLE or shape[3] % DOWNSAMPLE:
            raise ops.ShapeError(f"image extents {tuple(shape[2:])} are not multiples of {DOWNSAMPLE}")

    def encode_features(self, image: Tensor) -> Tensor:
        self._check_images(image)
        return self.fnet(2 * image - 1)

    def _mol(self, raw: Tensor) -> MoLParams:
        lo, hi = self.config.beta_range
        alpha = torch.sigmoid(raw[:, 0:1])
        beta2 = clamp_beta(raw[:, 1:2], lo, hi)
        beta1 = clamp_beta(raw[:, 2:3], lo, hi) if self.config.free_beta1 else None
        return MoLParams(alpha, beta2, beta1)

    def encode_context(self, i1: Tensor, i2: Tensor):
        """Context feature, initial hidden state, initial flow and mixture at 1/8 scale."""
        self._check_images(i1, i2)
        x = ops.concat([i1, i2]) if self.config.direct_init else i1
        context = self.cnet(2 * x - 1)
        hidden = self.hidden_head(context)
        b, _, h, w = context.shape
        if self.config.direct_init:
            out = self.init_head(context)
            flow, mol = out[:, :2], self._mol(out[:, 2:])
        else:
            flow = context.new_zeros(b, 2, h, w)
            ones = context.new_ones(b, 1, h, w)
            mol = MoLParams(ones, torch.zeros_like(ones), torch.zeros_like(ones) if self.config.free_beta1 else None)
        return context, hidden, flow, mol

    # -- refinement --------------------------------------------------------

    def refine_step(self, state: RefineState, pyr: CorrPyramid) -> RefineState:
        if state.iteration >= self.config.iters_inference:
            raise RuntimeError(
                f"refinement step {state.iteration} exceeds the {self.config.iters_inference}-iteration budget"
            )
        if state.flow.shape[2:] != (pyr.height, pyr.width):
            raise ops.ShapeError("state and pyramid resolutions differ")
        corr = lookup(pyr, state.flow, self.config.lookup)
        motion = self.motion(corr, state.flow)
        hidden = state.hidden
        for block in self.blocks:
            hidden = block(ops.concat([hidden, motion, state.context]))
        out = self.flow_head(hidden)
        base = state.flow.detach() if self.config.stop_gradient else state.flow
        flow = base + out[:, :2]
        return RefineState(hidden, state.context, flow, self._mol(out[:, 2:]), state.iteration + 1)

    def _upsample(self, state: RefineState) -> FlowPrediction:
        mask = 0.25 * self.mask_head(state.hidden)
        m = state.mol
        parts = [DOWNSAMPLE * state.flow, m.alpha, m.beta2] + ([m.beta1] if m.beta1 is not None else [])
        up = convex_upsample(torch.cat(parts, dim=1), mask)
        beta1 = up[:, 4:5] if m.beta1 is not None else None
        return FlowPrediction(up[:, :2], MoLParams(up[:, 2:3], up[:, 3:4], beta1))

    def forward(self, i1: Tensor, i2: Tensor, n_iters: int | None = None) -> list[FlowPrediction]:
        """Full-resolution predictions; element 0 is the initial flow, then one per step."""
        n_iters = self.config.iters if n_iters is None else n_iters
        if n_iters < 0:
            raise ValueError(f"n_iters must be >= 0, got {n_iters}")
        self._check_images(i1, i2)
        b = i1.shape[0]
        feats = self.encode_features(torch.cat([i1, i2], dim=0))
        pyr = build_pyramid(feats[:b], feats[b:], self.config.levels)
        context, hidden, flow, mol = self.encode_context(i1, i2)
        state = RefineState(hidden, context, flow, mol, 0)
        preds = [self._upsample(state)]
        for _ in range(n_iters):
            state = self.refine_step(state, pyr)
            preds.append(self._upsample(state))
        return preds

    @torch.no_grad()
    def predict(self, i1: Tensor, i2: Tensor, n_iters: int | None = None) -> Tensor:
        n_iters = self.config.iters if n_iters is None else n_iters
        return self.forward(i1, i2, n_iters)[-1].flow

    # -- introspection -----------------------------------------------------

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def count_macs(self, height: int, width: int, n_iters: int) -> int:
        for m in self.modules():
            if isinstance(m, Conv):
                m.macs = 0
        p = next(self.parameters())
        im = torch.zeros(1, 3, height, width, dtype=p.dtype)
        self.forward(im, im, n_iters)
        return sum(m.macs for m in self.modules() if isinstance(m, Conv))

    def summary(self, height: int = 64, width: int = 64) -> dict:
        """Parameter count and convolution multiply-accumulates."""
        base = self.count_macs(height, width, 0)
        one = self.count_macs(height, width, 1)
        return {
            "parameters": self.num_parameters(),
            "macs_setup": base,
            "macs_per_iteration": one - base,
            "resolution": [height, width],
        }

    # -- persistence -------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["model_config"] = config_to_dict(self.config)
        save_archive(path, {k: v for k, v in self.state_dict().items()}, meta)

    @classmethod
    def load(cls, path) -> tuple[SEARAFT, dict]:
        tensors, meta = load_archive(path)
        model = cls(config_from_dict(meta["model_config"]))
        model.load_weights(tensors)
        return model, meta

    def load_weights(self, tensors: dict[str, Tensor]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise KeyError(f"checkpoint lacks weights: {missing[:5]}")
        self.load_state_dict({k: tensors[k] for k in own})


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["beta_range"] = list(cfg.beta_range)
    d["encoder_widths"] = list(cfg.encoder_widths)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)
