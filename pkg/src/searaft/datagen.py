"""Synthetic image pairs with exact ground-truth flow.

Two generators:

* rigid scenes: a smooth depth map seen by a pinhole camera that moves by a
  small SE(3) transform, so the flow is induced purely by camera motion;
* affine pairs: a 2-D affine warp of a textured plane.

Textures are continuous procedural functions of the image-plane position, so
frame 2 is rendered by evaluating the frame-1 texture at the exact source
location of every pixel rather than by resampling a raster.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .fields import FlowField

_U64 = np.uint64


# ---------------------------------------------------------------------------
# procedural noise
# ---------------------------------------------------------------------------


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) value per integer lattice point."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.int64).view(np.uint64) * _U64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.int64).view(np.uint64) * _U64(0xC2B2AE3D27D4EB4F)
        h ^= _U64(seed & 0xFFFFFFFFFFFFFFFF) * _U64(0x165667B19E3779F9)
        h ^= h >> _U64(30)
        h *= _U64(0xBF58476D1CE4E5B9)
        h ^= h >> _U64(27)
        h *= _U64(0x94D049BB133111EB)
        h ^= h >> _U64(31)
    return (h >> _U64(11)).astype(np.float64) * 2.0**-53


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, period: float) -> np.ndarray:
    """Smoothstep-interpolated lattice noise with the given period, values in [0, 1)."""
    gx = np.asarray(x, dtype=np.float64) / period
    gy = np.asarray(y, dtype=np.float64) / period
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = _hash01(x0, y0, seed)
    v10 = _hash01(x0 + 1, y0, seed)
    v01 = _hash01(x0, y0 + 1, seed)
    v11 = _hash01(x0 + 1, y0 + 1, seed)
    top = v00 + sx * (v10 - v00)
    bot = v01 + sx * (v11 - v01)
    return top + sy * (bot - top)


def fractal_noise(x, y, seed: int, periods=(32.0, 16.0, 8.0), gain: float = 0.5) -> np.ndarray:
    """Multi-octave value noise normalized to [0, 1]."""
    total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    norm = 0.0
    amp = 1.0
    for k, p in enumerate(periods):
        total += amp * value_noise(x, y, seed * 7919 + k, p)
        norm += amp
        amp *= gain
    return total / norm


@dataclass(frozen=True)
class Texture:
    """Colored fractal noise, evaluable at any real image-plane position."""

    seed: int
    periods: tuple = (24.0, 12.0, 6.0)

    def palette(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xC0105])
        return rng.uniform(0.05, 0.95, size=(5, 3))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        pal = self.palette()
        t = np.clip(fractal_noise(x, y, self.seed, self.periods), 0, 1) * (len(pal) - 1)
        i = np.minimum(np.floor(t).astype(np.int64), len(pal) - 2)
        f = (t - i)[..., None]
        color = pal[i] * (1 - f) + pal[i + 1] * f
        shade = 0.7 + 0.3 * fractal_noise(x, y, self.seed + 1, self.periods)
        return np.clip(color * shade[..., None], 0.0, 1.0)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(x, y)`` coordinates of pixel centers; ``x`` is the column index."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return x, y


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear read of an (H, W[, C]) array with edge clamping."""
    h, w = image.shape[:2]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# rigid scenes
# ---------------------------------------------------------------------------


def rotation_matrix(axis_angle) -> np.ndarray:
    """Rodrigues formula; a zero vector gives the exact identity."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


@dataclass
class RigidScene:
    """Frame-1 depth, pinhole intrinsics ``(fx, fy, cx, cy)``, and the frame-1 to frame-2 pose."""

    depth: np.ndarray
    intrinsics: tuple[float, float, float, float]
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.depth.ndim != 2 or not np.all(self.depth > 0):
            raise ValueError("depth must be a 2-D map of positive values")
        r = self.rotation
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def project(self, x, y, depth):
        """Map frame-1 pixels with known depth to frame-2 pixel positions and depth."""
        fx, fy, cx, cy = self.intrinsics
        if not self.translation.any() and np.array_equal(self.rotation, np.eye(3)):
            # exact for the static camera; the general path leaves ~1e-15 px residue
            return np.array(x, dtype=np.float64), np.array(y, dtype=np.float64), np.array(depth, dtype=np.float64)
        pts = np.stack(((x - cx) / fx * depth, (y - cy) / fy * depth, depth), axis=-1)
        moved = pts @ self.rotation.T + self.translation
        z = moved[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x2 = fx * moved[..., 0] / z + cx
            y2 = fy * moved[..., 1] / z + cy
        return x2, y2, z


def rigid_flow(scene: RigidScene) -> FlowField:
    """Flow from back-projection, rigid transform, and re-projection.

    Pixels that land behind the camera or outside frame 2 are invalid.
    """
    h, w = scene.shape
    x, y = pixel_grid(h, w)
    x2, y2, z = scene.project(x, y, scene.depth)
    valid = (z > 1e-6) & (x2 >= 0) & (x2 <= w - 1) & (y2 >= 0) & (y2 <= h - 1)
    flow = np.stack((x2 - x, y2 - y), axis=-1)
    flow[~valid] = 0.0
    return FlowField(flow, valid)


def occlusion_mask(scene: RigidScene, flow: FlowField, tolerance: float = 0.01) -> np.ndarray:
    """True where a frame-1 pixel is hidden in frame 2 by a nearer splatted pixel."""
    h, w = scene.shape
    x, y = pixel_grid(h, w)
    _, _, z = scene.project(x, y, scene.depth)
    tx = np.rint(x + flow.u).astype(np.int64)
    ty = np.rint(y + flow.v).astype(np.int64)
    ok = flow.valid
    zbuf = np.full((h, w), np.inf)
    np.minimum.at(zbuf, (ty[ok], tx[ok]), z[ok])
    occluded = np.zeros((h, w), dtype=bool)
    occluded[ok] = z[ok] > zbuf[ty[ok], tx[ok]] * (1 + tolerance)
    return occluded


DEFAULT_DEPTH_RANGE = (2.0, 20.0)
MAX_TRANSLATION = 0.5
MAX_ROTATION_DEG = 10.0


def synth_scene(
    seed: int,
    resolution: tuple[int, int] = (64, 64),
    motion_scale: float = 1.0,
    max_flow_fraction: float = 0.125,
) -> RigidScene:
    """Random smooth depth and random small camera motion.

    The pose is shrunk until no valid pixel moves more than
    ``motion_scale * max_flow_fraction * max(H, W)`` pixels.
    """
    h, w = resolution
    rng = np.random.default_rng([seed, 0x5CE4E])
    x, y = pixel_grid(h, w)
    lo, hi = DEFAULT_DEPTH_RANGE
    span = max(h, w)
    noise = fractal_noise(x, y, int(rng.integers(2**31)), (span / 1.5, span / 3.0, span / 6.0))
    # bias toward the near range so that parallax is visible
    depth = lo + (hi - lo) * noise**2
    f = 0.9 * w
    intrinsics = (f, f, (w - 1) / 2.0, (h - 1) / 2.0)
    if motion_scale <= 0:
        return RigidScene(depth, intrinsics, np.eye(3), np.zeros(3))

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(MAX_ROTATION_DEG) * rng.uniform(0, 1) * min(motion_scale, 1.0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    trans = direction * MAX_TRANSLATION * rng.uniform(0.2, 1) * min(motion_scale, 1.0)
    bound = motion_scale * max_flow_fraction * span
    shrink = 1.0
    for _ in range(200):
        scene = RigidScene(depth, intrinsics, rotation_matrix(axis * angle * shrink), trans * shrink)
        fl = rigid_flow(scene)
        if not fl.valid.any() or fl.magnitude()[fl.valid].max() <= bound:
            return scene
        shrink *= 0.85
    return RigidScene(depth, intrinsics, np.eye(3), np.zeros(3))


@dataclass
class SamplePair:
    """Two (H, W, 3) float32 frames in [0, 1], ground truth, and generator metadata."""

    i1: np.ndarray
    i2: np.ndarray
    gt: FlowField
    meta: dict = field(default_factory=dict)


def _invert_warp(forward, qx, qy, iters: int = 50):
    """Solve ``p + forward(p) = q`` by fixed-point iteration."""
    px, py = qx.copy(), qy.copy()
    for _ in range(iters):
        u, v = forward(px, py)
        px, py = qx - u, qy - v
    u, v = forward(px, py)
    residual = np.hypot(px + u - qx, py + v - qy)
    return px, py, residual


def render_pair(scene: RigidScene, texture_seed: int) -> SamplePair:
    """Render frame 1 from the texture and frame 2 by inverse-warping along the rigid flow.

    Frame-2 pixels whose source falls outside frame 1 (or cannot be located)
    are filled with an unrelated texture.
    """
    h, w = scene.shape
    tex = Texture(texture_seed)
    fresh = Texture(texture_seed + 0x9E37)
    x, y = pixel_grid(h, w)
    i1 = tex(x, y)

    gt = rigid_flow(scene)
    occ = occlusion_mask(scene, gt)
    gt = FlowField(gt.vectors, gt.valid & ~occ)

    def forward(px, py):
        d = sample_bilinear(scene.depth, px, py)
        x2, y2, _ = scene.project(px, py, d)
        return x2 - px, y2 - py

    px, py, residual = _invert_warp(forward, x, y)
    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1) & (residual < 1e-4)
    i2 = np.where(inside[..., None], tex(px, py), fresh(x, y))
    meta = {"kind": "rigid", "texture_seed": int(texture_seed)}
    return SamplePair(i1.astype(np.float32), i2.astype(np.float32), _as_f32(gt), meta)


def _as_f32(f: FlowField) -> FlowField:
    return FlowField(f.vectors.astype(np.float32), f.valid)


# ---------------------------------------------------------------------------
# affine pairs
# ---------------------------------------------------------------------------


def affine_pair(
    seed: int,
    resolution: tuple[int, int] = (64, 64),
    max_disp: float = 6.0,
    matrix=None,
    translation=None,
) -> SamplePair:
    """Textured plane moved by ``q = c + A (p - c) + t`` about the image center ``c``.

    ``matrix``/``translation`` override the random draw. Random draws keep
    every flow vector within ``max_disp`` pixels.
    """
    h, w = resolution
    rng = np.random.default_rng([seed, 0xAFF1])
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    if matrix is None and translation is None:
        lin = rng.uniform(-1, 1, size=(2, 2)) * 0.04
        t = rng.uniform(-1, 1, size=2) * max_disp
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64) - c
        worst = np.max(np.linalg.norm(corners @ lin.T + t, axis=1))
        if worst > max_disp:
            lin *= max_disp / worst
            t *= max_disp / worst
        a = np.eye(2) + lin
    else:
        a = np.eye(2) if matrix is None else np.asarray(matrix, dtype=np.float64)
        t = np.zeros(2) if translation is None else np.asarray(translation, dtype=np.float64)
    a_inv = np.linalg.inv(a)

    tex = Texture(int(rng.integers(2**31)))
    x, y = pixel_grid(h, w)
    p = np.stack((x, y), axis=-1) - c
    q = p @ a.T + t + c
    flow = q - (p + c)
    valid = (q[..., 0] >= 0) & (q[..., 0] <= w - 1) & (q[..., 1] >= 0) & (q[..., 1] <= h - 1)
    src = (np.stack((x, y), axis=-1) - c - t) @ a_inv.T + c
    i1 = tex(x, y)
    i2 = tex(src[..., 0], src[..., 1])
    meta = {"kind": "affine", "seed": int(seed), "matrix": a.tolist(), "translation": t.tolist()}
    return SamplePair(i1.astype(np.float32), i2.astype(np.float32), FlowField(flow.astype(np.float32), valid), meta)


# ---------------------------------------------------------------------------
# corpus configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    mode: str = "affine"
    count: int = 20
    resolution: tuple[int, int] = (64, 64)
    seed: int = 0
    max_disp: float = 6.0
    motion_scale: float = 1.0
    max_flow_fraction: float = 0.125

    def __post_init__(self):
        if self.mode not in ("affine", "rigid"):
            raise ValueError(f"unknown data mode {self.mode!r}")
        if self.count < 1:
            raise ValueError("count must be positive")
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))

    def config_hash(self) -> str:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def sample_seed(cfg: DataConfig, index: int) -> int:
    return cfg.seed * 1_000_003 + index


def generate(cfg: DataConfig, index: int) -> SamplePair:
    """Sample ``index`` of the corpus described by ``cfg``; pure in its arguments."""
    s = sample_seed(cfg, index)
    if cfg.mode == "affine":
        pair = affine_pair(s, cfg.resolution, cfg.max_disp)
    else:
        scene = synth_scene(s, cfg.resolution, cfg.motion_scale, cfg.max_flow_fraction)
        pair = render_pair(scene, s + 17)
        pair.meta["scene"] = {
            "intrinsics": list(scene.intrinsics),
            "rotation": scene.rotation.tolist(),
            "translation": scene.translation.tolist(),
        }
    pair.meta.update({"seed": s, "index": index, "config_hash": cfg.config_hash()})
    return pair


def generate_all(cfg: DataConfig, start: int = 0):
    """Yield samples in index order, one at a time."""
    for i in range(start, start + cfg.count):
        yield generate(cfg, i)
