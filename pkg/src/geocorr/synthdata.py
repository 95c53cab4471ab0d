"""Synthetic correspondence pairs with exact ground truth.

Scenes are procedural: analytic textures let a warped view be rendered by
evaluating the same function at transformed locations, so ground-truth
correspondences are exact rather than interpolated. Every generator is a
pure function of its SceneSpec: one seed, one byte-identical sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .geometry import (
    homography_apply,
    make_intrinsics,
    noise_ball,
    random_homography,
    random_rotation,
    se3_apply,
    se3_compose,
    se3_inverse,
    unproject_pixels,
)

TASKS = ("2d2d", "2d3d", "3d3d")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 64                   # image side in pixels
    n_keypoints: int = 128
    noise: float = 0.0               # observation noise radius, hard L2 bound
    overlap: float = 0.5             # fraction of source region seen by target
    max_rotation_deg: float = 45.0
    max_translation: float = 8.0     # homography translation range, px
    max_perspective: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    n_waves: int = 8
    n_blobs: int = 6
    n_surface: int = 1600            # base samples for 3d3d surfaces
    height_amp: float = 0.35
    cloud_translation: float = 0.5
    depth_base: float = 1.5
    depth_amp: float = 0.4
    cloud_stride: int = 2            # pixel stride for the 2d3d pseudo cloud

    def __post_init__(self):
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        if self.n_keypoints < 1:
            raise ConfigError("need at least one keypoint")
        if not (0.0 < self.overlap <= 1.0):
            raise ConfigError(f"overlap must be in (0, 1], got {self.overlap}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.cloud_stride < 1:
            raise ConfigError("cloud stride must be >= 1")


@dataclass
class TrainSample:
    task: str
    source: np.ndarray               # (H, W) image or (P, 3) cloud
    target: np.ndarray
    kps_src: np.ndarray              # (N, 2) px or (N, 3) units
    kps_tgt: np.ndarray
    mask: np.ndarray                 # (N,) bool, True = visible in target
    transform: np.ndarray            # 3x3 homography or 4x4 rigid map
    source_intensity: np.ndarray | None = None   # per-point cloud values
    target_intensity: np.ndarray | None = None
    intrinsics: np.ndarray | None = None         # 3x3, 2d3d only
    seed: int = 0

    def arrays(self) -> dict:
        """Named float64 views of every populated field, for serialization."""
        out = {
            "source": self.source,
            "target": self.target,
            "kps_src": self.kps_src,
            "kps_tgt": self.kps_tgt,
            "mask": self.mask.astype(np.float64),
            "transform": self.transform,
        }
        for name in ("source_intensity", "target_intensity", "intrinsics"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


# -- procedural fields -------------------------------------------------


def waves2d(rng: np.random.Generator, n: int, lam_lo: float, lam_hi: float,
            normalized: bool = False):
    lam = rng.uniform(lam_lo, lam_hi, n)
    th = rng.uniform(0, 2 * np.pi, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.5, 1.0, n)
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)     # (n, 2)
    scale = amp.sum() if normalized else math.sqrt(n)

    def f(pts: np.ndarray) -> np.ndarray:
        proj = np.asarray(pts, dtype=np.float64) @ dirs.T  # (N, n)
        return (amp * np.sin(2 * np.pi * proj / lam + ph)).sum(axis=1) / scale

    return f


def texture2d(rng: np.random.Generator, spec: SceneSpec):
    """Sinusoid bank plus Gaussian blobs, evaluated anywhere in the plane."""
    wav = waves2d(rng, spec.n_waves, 6.0, 32.0)
    c = rng.uniform(0, spec.size - 1, (spec.n_blobs, 2))
    s = rng.uniform(3.0, 10.0, spec.n_blobs)
    a = rng.uniform(-1.0, 1.0, spec.n_blobs)

    def f(pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        d2 = ((p[:, None, :] - c[None]) ** 2).sum(axis=2)  # (N, blobs)
        return wav(p) + (a * np.exp(-d2 / (2 * s * s))).sum(axis=1)

    return f


def field3d(rng: np.random.Generator, n: int):
    lam = rng.uniform(0.15, 0.8, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.5, 1.0, n)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    def f(pts: np.ndarray) -> np.ndarray:
        proj = np.asarray(pts, dtype=np.float64) @ d.T
        return (amp * np.sin(2 * np.pi * proj / lam + ph)).sum(axis=1) / math.sqrt(n)

    return f


def keypoint_grid(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Jittered cell centers; a random subset when the grid overshoots n."""
    g = math.ceil(math.sqrt(n))
    cell = size / g
    centers = (np.arange(g) + 0.5) * cell
    xx, yy = np.meshgrid(centers, centers)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    pick = rng.choice(len(pts), size=n, replace=False)
    pts = pts[pick] + rng.uniform(-0.5 * cell, 0.5 * cell, size=(n, 2))
    return np.clip(pts, 0.0, size - 1.0)


def render_image(tex, size: int) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(xs, xs)
    flat = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return tex(flat).reshape(size, size)


# -- generators --------------------------------------------------------


def gen_2d2d(spec: SceneSpec) -> TrainSample:
    rng = np.random.default_rng(spec.seed)
    tex = texture2d(rng, spec)
    h = random_homography(rng, spec.size, spec.max_rotation_deg,
                          spec.max_translation, spec.max_perspective,
                          spec.scale_range)
    src = render_image(tex, spec.size)
    # target pixel (x, y) shows the texture point that maps onto it
    hinv = np.linalg.inv(h)
    xs = np.arange(spec.size, dtype=np.float64)
    xx, yy = np.meshgrid(xs, xs)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    tgt = tex(homography_apply(hinv, grid)).reshape(spec.size, spec.size)

    kps_s = keypoint_grid(rng, spec.n_keypoints, spec.size)
    kps_t = homography_apply(h, kps_s)
    kps_t = kps_t + noise_ball(rng, spec.n_keypoints, 2, spec.noise)
    lim = spec.size - 1
    mask = ((kps_t[:, 0] >= 0) & (kps_t[:, 0] <= lim)
            & (kps_t[:, 1] >= 0) & (kps_t[:, 1] <= lim))
    return TrainSample(task="2d2d", source=src, target=tgt, kps_src=kps_s,
                       kps_tgt=kps_t, mask=mask, transform=h, seed=spec.seed)


def surface_points(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    """Heightfield sheet plus a spherical bump, sampled uniformly."""
    n = spec.n_surface
    height = waves2d(rng, 6, 0.25, 1.0, normalized=True)
    xy = rng.uniform(0.0, 1.0, size=(n, 2))
    z = spec.height_amp * height(xy)
    pts = np.hstack([xy, z[:, None]])
    # bump: push points inside a random disc up onto a spherical cap
    c = rng.uniform(0.25, 0.75, size=2)
    rad = rng.uniform(0.12, 0.22)
    d2 = ((xy - c) ** 2).sum(axis=1)
    cap = d2 < rad * rad
    pts[cap, 2] += np.sqrt(np.maximum(rad * rad - d2[cap], 0.0))
    return pts


def gen_3d3d(spec: SceneSpec) -> TrainSample:
    rng = np.random.default_rng(spec.seed)
    intens_field = field3d(rng, spec.n_waves)
    base = surface_points(rng, spec)
    intens = intens_field(base)
    p = len(base)
    w = 1.0 / (2.0 - spec.overlap)
    n_keep = int(round(w * p))
    for _ in range(64):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        order = np.argsort(base @ direction, kind="stable")
        src_idx = order[:n_keep]
        tgt_idx = order[p - n_keep:]
        if 2 * n_keep - p >= 32:
            break
    else:
        raise DataError("overlap region stayed below 32 points")

    rot = random_rotation(rng, spec.max_rotation_deg)
    t = rng.uniform(-spec.cloud_translation, spec.cloud_translation, size=3)
    m = se3_compose(rot, t)
    tgt_cloud = se3_apply(m, base[tgt_idx])
    tgt_cloud = tgt_cloud + noise_ball(rng, len(tgt_idx), 3, spec.noise)

    n_src = len(src_idx)
    kp_sel = rng.choice(n_src, size=spec.n_keypoints,
                        replace=n_src < spec.n_keypoints)
    kp_base = src_idx[kp_sel]
    kps_s = base[kp_base]
    kps_t = se3_apply(m, kps_s) + noise_ball(rng, spec.n_keypoints, 3, spec.noise)
    mask = np.isin(kp_base, tgt_idx)
    return TrainSample(task="3d3d", source=base[src_idx], target=tgt_cloud,
                       kps_src=kps_s, kps_tgt=kps_t, mask=mask, transform=m,
                       source_intensity=intens[src_idx],
                       target_intensity=intens[tgt_idx], seed=spec.seed)


def gen_2d3d(spec: SceneSpec) -> TrainSample:
    rng = np.random.default_rng(spec.seed)
    g3 = field3d(rng, spec.n_waves)
    depth_fn = waves2d(rng, 4, 0.5 * spec.size, 2.0 * spec.size, normalized=True)
    k = make_intrinsics(spec.size)
    cam_to_world = se3_compose(random_rotation(rng, spec.max_rotation_deg),
                               rng.uniform(-0.5, 0.5, size=3))
    world_to_cam = se3_inverse(cam_to_world)

    def world_at(uv: np.ndarray) -> np.ndarray:
        z = spec.depth_base + spec.depth_amp * depth_fn(uv)
        return se3_apply(cam_to_world, unproject_pixels(k, uv, z))

    size = spec.size
    xs = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(xs, xs)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    image = g3(world_at(grid)).reshape(size, size)

    # target cloud: strided unprojection restricted to a column window
    u_min = rng.uniform(0.0, (1.0 - spec.overlap) * (size - 1))
    u_max = u_min + spec.overlap * (size - 1)
    stride_axis = np.arange(0, size, spec.cloud_stride, dtype=np.float64)
    sx, sy = np.meshgrid(stride_axis, stride_axis)
    spix = np.stack([sx.ravel(), sy.ravel()], axis=1)
    spix = spix[(spix[:, 0] >= u_min) & (spix[:, 0] <= u_max)]
    if len(spix) < 32:
        raise DataError("target cloud window holds fewer than 32 points")
    cloud_clean = world_at(spix)
    cloud = cloud_clean + noise_ball(rng, len(spix), 3, spec.noise)

    kps_s = keypoint_grid(rng, spec.n_keypoints, size)
    kps_t = world_at(kps_s) + noise_ball(rng, spec.n_keypoints, 3, spec.noise)
    mask = (kps_s[:, 0] >= u_min) & (kps_s[:, 0] <= u_max)
    return TrainSample(task="2d3d", source=image, target=cloud,
                       kps_src=kps_s, kps_tgt=kps_t, mask=mask,
                       transform=world_to_cam, intrinsics=k,
                       target_intensity=g3(cloud_clean), seed=spec.seed)


def depth_to_pseudo_cloud(depth: np.ndarray, k: np.ndarray, stride: int):
    """Unproject every stride-th pixel with valid depth into camera space.

    Returns (points, pixels); zero, negative, and non-finite depths are
    dropped.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise DataError(f"depth map must be 2-D, got shape {d.shape}")
    ys = np.arange(0, d.shape[0], stride)
    xs = np.arange(0, d.shape[1], stride)
    xx, yy = np.meshgrid(xs.astype(np.float64), ys.astype(np.float64))
    uv = np.stack([xx.ravel(), yy.ravel()], axis=1)
    z = d[yy.ravel().astype(int), xx.ravel().astype(int)]
    ok = np.isfinite(z) & (z > 0)
    uv = uv[ok]
    return unproject_pixels(k, uv, z[ok]), uv


GENERATORS = {"2d2d": gen_2d2d, "2d3d": gen_2d3d, "3d3d": gen_3d3d}


def generate(task: str, spec: SceneSpec) -> TrainSample:
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    return GENERATORS[task](spec)
