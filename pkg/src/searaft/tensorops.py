"""Differentiable image operators used throughout the flow network.

Tensors are ``torch.Tensor`` objects laid out as ``(batch, channel, row, col)``.
Reverse-mode differentiation is delegated to ``torch.autograd``; the
bilinear sampler, which drives the correlation lookup, carries its own
analytic backward pass.

Training runs in float32, gradient checks run in float64.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.autograd.function import once_differentiable

Tensor = torch.Tensor

_DUMP_HEADER = struct.Struct("<4i")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def check_tensor4(x: Tensor, name: str = "input") -> Tensor:
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, row, col), got shape {tuple(x.shape)}")
    return x


# ---------------------------------------------------------------------------
# linear operators
# ---------------------------------------------------------------------------


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation.

    Output extent is ``(in + 2 * padding - k) // stride + 1`` along each axis.
    """
    check_tensor4(input)
    check_tensor4(weight, "weight")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if weight.shape[1] != input.shape[1]:
        raise ShapeError(
            f"kernel expects {weight.shape[1]} input channels, input has {input.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    kh, kw = weight.shape[2:]
    if input.shape[2] + 2 * padding < kh or input.shape[3] + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {tuple(input.shape[2:])}")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def depthwise_conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` has shape ``(C, 1, k, k)``."""
    check_tensor4(input)
    check_tensor4(weight, "weight")
    c = input.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise kernel must be ({c}, 1, k, k), got {tuple(weight.shape)}")
    return F.conv2d(input, weight, bias, padding=padding, groups=c)


def avg_pool2(input: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` blocks.

    Extents that are not multiples of ``factor`` are replicate-padded on the
    bottom/right edge first, so the output has ``ceil(n / factor)`` cells.
    """
    check_tensor4(input)
    if factor < 1:
        raise ValueError(f"pooling factor must be >= 1, got {factor}")
    if factor & (factor - 1):
        raise ValueError(f"pooling factor must be a power of two, got {factor}")
    if factor == 1:
        return input
    h, w = input.shape[2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        input = F.pad(input, (0, pw, 0, ph), mode="replicate")
    return F.avg_pool2d(input, factor)


# ---------------------------------------------------------------------------
# bilinear sampling with analytic backward
# ---------------------------------------------------------------------------


def _taps(coords: Tensor, height: int, width: int):
    x = coords[..., 0]
    y = coords[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    out = []
    for dy, dx, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        index = torch.where(inside, yi * width + xi, torch.zeros_like(xi))
        out.append((index, inside, w))
    return out, fx, fy


def _gather(flat: Tensor, index: Tensor, inside: Tensor) -> Tensor:
    # flat: (N, C, H*W); index/inside: (N, P)
    n, c, _ = flat.shape
    vals = torch.gather(flat, 2, index.unsqueeze(1).expand(n, c, index.shape[1]))
    return vals * inside.unsqueeze(1).to(flat.dtype)


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fmap: Tensor, coords: Tensor) -> Tensor:
        n, c, h, w = fmap.shape
        ho, wo = coords.shape[1:3]
        flat = fmap.reshape(n, c, h * w)
        taps, _, _ = _taps(coords.reshape(n, ho * wo, 2), h, w)
        out = torch.zeros(n, c, ho * wo, dtype=fmap.dtype, device=fmap.device)
        for index, inside, weight in taps:
            out = out + _gather(flat, index, inside) * weight.unsqueeze(1)
        ctx.save_for_backward(fmap, coords)
        return out.reshape(n, c, ho, wo)

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out: Tensor):
        fmap, coords = ctx.saved_tensors
        n, c, h, w = fmap.shape
        ho, wo = coords.shape[1:3]
        flat = fmap.reshape(n, c, h * w)
        g = grad_out.reshape(n, c, ho * wo)
        taps, fx, fy = _taps(coords.reshape(n, ho * wo, 2), h, w)

        grad_map = grad_coords = None
        if ctx.needs_input_grad[0]:
            grad_flat = torch.zeros_like(flat)
            for index, inside, weight in taps:
                contrib = g * (weight * inside.to(g.dtype)).unsqueeze(1)
                grad_flat.scatter_add_(2, index.unsqueeze(1).expand(n, c, index.shape[1]), contrib)
            grad_map = grad_flat.reshape(n, c, h, w)
        if ctx.needs_input_grad[1]:
            v00, v01, v10, v11 = (_gather(flat, index, inside) for index, inside, _ in taps)
            # v01 is (x0+1, y0), v10 is (x0, y0+1)
            fx_ = fx.unsqueeze(1)
            fy_ = fy.unsqueeze(1)
            dx = (1 - fy_) * (v01 - v00) + fy_ * (v11 - v10)
            dy = (1 - fx_) * (v10 - v00) + fx_ * (v11 - v01)
            grad_coords = torch.stack(((g * dx).sum(1), (g * dy).sum(1)), dim=-1)
            grad_coords = grad_coords.reshape(n, ho, wo, 2)
        return grad_map, grad_coords


def bilinear_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Sample ``fmap`` at real-valued pixel locations.

    Parameters
    ----------
    fmap : (N, C, H, W) tensor
    coords : (N, Ho, Wo, 2) tensor of ``(x, y)`` positions in pixel units,
        where ``x`` indexes columns and ``y`` rows.

    Returns
    -------
    (N, C, Ho, Wo) tensor. Taps falling outside the map read zero.
    """
    check_tensor4(fmap, "map")
    if coords.dim() != 4 or coords.shape[-1] != 2 or coords.shape[0] != fmap.shape[0]:
        raise ShapeError(
            f"coords must be (N, Ho, Wo, 2) with N={fmap.shape[0]}, got {tuple(coords.shape)}"
        )
    if coords.dtype != fmap.dtype:
        raise TypeError(f"coords dtype {coords.dtype} differs from map dtype {fmap.dtype}")
    return _BilinearSample.apply(fmap, coords)


# ---------------------------------------------------------------------------
# pointwise and channel operators
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a * b


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    for t in tensors:
        check_tensor4(t)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"cannot concatenate {tuple(t.shape)} with {tuple(base)}")
    return torch.cat(list(tensors), dim=1)


def channel_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the channel axis at every pixel."""
    check_tensor4(x)
    mean = x.mean(1, keepdim=True)
    var = (x - mean).pow(2).mean(1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight.view(1, -1, 1, 1)
    if bias is not None:
        y = y + bias.view(1, -1, 1, 1)
    return y


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    check_tensor4(x)
    return F.instance_norm(x, eps=eps)


def softmax_group(x: Tensor, group_size: int) -> Tensor:
    """Softmax across ``group_size`` channel blocks.

    Channels are viewed as ``(group_size, C // group_size)`` and normalized
    over the first axis, so channel ``k * (C // group_size) + j`` is the
    ``k``-th competitor for slot ``j``.
    """
    check_tensor4(x)
    n, c, h, w = x.shape
    if c % group_size:
        raise ShapeError(f"{c} channels not divisible by group size {group_size}")
    return torch.softmax(x.view(n, group_size, c // group_size, h, w), dim=1).view(n, c, h, w)


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Spatial resize; bilinear uses corner-aligned sampling."""
    check_tensor4(x)
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    if mode == "bilinear":
        return F.interpolate(x, size=size, mode="bilinear", align_corners=True)
    raise ValueError(f"unknown resize mode {mode!r}")


# ---------------------------------------------------------------------------
# reverse mode entry point
# ---------------------------------------------------------------------------


def backward(root: Tensor, seed: Tensor | None = None, inputs: Sequence[Tensor] | None = None):
    """Propagate ``seed`` back from ``root``.

    With ``inputs`` given, returns their gradients (zeros for inputs that do
    not influence ``root``) without touching ``.grad``. Otherwise gradients are
    accumulated into the ``.grad`` of every leaf.
    """
    if root.grad_fn is None:
        raise RuntimeError("backward called on a tensor with no recorded forward graph")
    if seed is None:
        seed = torch.ones_like(root)
    elif seed.shape != root.shape:
        raise ShapeError(f"seed shape {tuple(seed.shape)} does not match root {tuple(root.shape)}")
    if inputs is None:
        torch.autograd.backward(root, seed)
        return None
    grads = torch.autograd.grad(root, list(inputs), seed, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(inputs, grads)]


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    seed_rng: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest ``|analytic - fd| / max(1, |fd|)`` over all input entries.

    ``fn`` is contracted with a fixed random cotangent so that a single scalar
    is differentiated. Inputs should be float64.
    """
    inputs = [t.detach().clone() for t in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    gen = torch.Generator().manual_seed(seed_rng)
    out = fn(*inputs)
    cot = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    leaves = [t.clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    out = fn(*leaves)
    targets = [leaves[i] for i in wrt]
    analytic = backward((out * cot).sum(), inputs=targets)

    worst = 0.0
    with torch.no_grad():
        for i, g in zip(wrt, analytic):
            base = inputs[i]
            flat = base.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = (fn(*inputs) * cot).sum().item()
                flat[j] = orig - step
                fm = (fn(*inputs) * cot).sum().item()
                flat[j] = orig
                fd = (fp - fm) / (2 * step)
                err = abs(g.reshape(-1)[j].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# tensor dump format: 4 x int32 extents, float32 payload, little-endian
# ---------------------------------------------------------------------------


def dump_tensor(x: Tensor | np.ndarray, path: str | Path) -> None:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"tensor dumps hold 4-D arrays, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(*arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise ValueError(f"{path}: truncated tensor header")
    shape = _DUMP_HEADER.unpack_from(raw)
    if any(s < 0 for s in shape):
        raise ValueError(f"{path}: negative extent in header {shape}")
    count = int(np.prod(shape))
    payload = raw[_DUMP_HEADER.size :]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return torch.from_numpy(arr.copy())
