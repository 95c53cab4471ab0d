"""Modality tokenizers: turn raw images / point clouds into token fields.

A token field is a set of features with coordinates in the input's raw
units, plus the frame that maps those units into the normalized space the
rest of the network works in (images: extent -> [0,1]^2; clouds: centered
and divided by the bounding-box diameter).

Both tokenizers are deliberately small: patch or voxel pooling, a linear
lift, and two rotary self-attention blocks for context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention
from .errors import ConfigError, DataError
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor, as_tensor

VALID_UPSAMPLE_RATIOS = (1, 2, 4, 8)


@dataclass(frozen=True)
class CoordFrame:
    """Affine map between raw coordinates and the model's normalized space."""

    offset: tuple
    scale: tuple
    kind: str = "image"            # "image" | "cloud"

    @staticmethod
    def for_image(width: int, height: int) -> "CoordFrame":
        return CoordFrame(offset=(0.0, 0.0), scale=(float(width), float(height)), kind="image")

    @staticmethod
    def for_cloud(points: np.ndarray) -> "CoordFrame":
        if len(points) == 0:
            raise DataError("empty point cloud")
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        center = 0.5 * (lo + hi)
        diam = float(np.linalg.norm(hi - lo))
        if diam <= 0:
            raise DataError("cloud has zero spatial extent")
        return CoordFrame(offset=tuple(center), scale=(diam,) * 3, kind="cloud")

    @property
    def dim(self) -> int:
        return len(self.offset)

    @property
    def diameter(self) -> float:
        # for images, the diagonal in raw units; for clouds, the bbox diagonal
        if self.kind == "image":
            return float(np.hypot(*self.scale))
        return float(self.scale[0])

    def normalize(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - np.array(self.offset)) / np.array(self.scale)

    def denormalize(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * np.array(self.scale) + np.array(self.offset)

    def normalize_t(self, coords: Tensor) -> Tensor:
        return T.div(T.sub(coords, np.array(self.offset)), np.array(self.scale))

    def denormalize_t(self, coords: Tensor) -> Tensor:
        return T.add(T.mul(coords, np.array(self.scale)), np.array(self.offset))


@dataclass(frozen=True)
class GridInfo:
    """Regular token grid metadata (images only)."""

    shape: tuple                   # (rows, cols)
    origin: tuple                  # raw-unit center of token (0, 0), as (x, y)
    spacing: tuple                 # raw units between token centers, (sx, sy)


@dataclass
class TokenField:
    features: Tensor               # (T, D)
    coords: np.ndarray             # (T, m) raw units
    frame: CoordFrame
    grid: GridInfo | None = None
    _norm: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    @property
    def norm_coords(self) -> np.ndarray:
        if self._norm is None:
            self._norm = self.frame.normalize(self.coords)
        return self._norm


class SelfAttnBlock(Module):
    """Pre-norm transformer block with rotary phases on its own coords."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 rope_base: float, rope_scale: float, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(
            AttentionConfig(kind="vanilla", heads=heads, embed_dim=dim), rng,
            rope_base=rope_base, rope_scale=rope_scale)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], rng)

    def __call__(self, x: Tensor, norm_coords: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.attn(h, h, h, q_coords=norm_coords, k_coords=norm_coords))
        x = T.add(x, self.mlp(self.norm2(x)))
        return x


def image_to_patches(image: np.ndarray, patch: int) -> tuple[np.ndarray, GridInfo]:
    """(H, W[, C]) -> (rows*cols, patch*patch*C) plus the grid layout."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DataError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    h, w, c = img.shape
    if h % patch or w % patch:
        raise DataError(f"image size {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    # (rows, patch, cols, patch, C) -> (rows, cols, patch, patch, C)
    tiles = img.reshape(rows, patch, cols, patch, c).transpose(0, 2, 1, 3, 4)
    flat = tiles.reshape(rows * cols, patch * patch * c)
    grid = GridInfo(shape=(rows, cols), origin=(patch / 2.0, patch / 2.0),
                    spacing=(float(patch), float(patch)))
    return flat, grid


def grid_coords(grid: GridInfo) -> np.ndarray:
    """Token-center coordinates (x, y) in raw units, row-major rows of tokens."""
    rows, cols = grid.shape
    ys = grid.origin[1] + np.arange(rows) * grid.spacing[1]
    xs = grid.origin[0] + np.arange(cols) * grid.spacing[0]
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class ImageTokenizer(Module):
    """Patch embedding plus two rotary self-attention blocks."""

    def __init__(self, patch: int, d_enc: int, rng: np.random.Generator,
                 channels: int = 1, heads: int = 4, depth: int = 2,
                 rope_base: float = 100.0, rope_scale: float = 2.0 * np.pi):
        if patch < 1:
            raise ConfigError(f"patch must be >= 1, got {patch}")
        self.patch = patch
        self.channels = channels
        self.embed = Linear(patch * patch * channels, d_enc, rng)
        self.blocks = [SelfAttnBlock(d_enc, heads, rng, rope_base, rope_scale)
                       for _ in range(depth)]

    def __call__(self, image: np.ndarray) -> TokenField:
        flat, grid = image_to_patches(image, self.patch)
        img = np.asarray(image)
        h, w = img.shape[:2]
        c = 1 if img.ndim == 2 else img.shape[2]
        if c != self.channels:
            raise DataError(f"expected {self.channels}-channel image, got {c}")
        frame = CoordFrame.for_image(w, h)
        coords = grid_coords(grid)
        x = self.embed(Tensor(flat))
        nc = frame.normalize(coords)
        for blk in self.blocks:
            x = blk(x, nc)
        return TokenField(features=x, coords=coords, frame=frame, grid=grid)


# -- point clouds ------------------------------------------------------

_STATS_DIM = 9


def voxel_pool(points: np.ndarray, intensity: np.ndarray | None,
               stride: float) -> tuple[np.ndarray, np.ndarray]:
    """Group points into voxels of ``stride`` (normalized units).

    Returns (centroids_raw_index_space, stats): centroids are in the same
    units as ``points``; stats are scale-free per-voxel summaries. Token
    order follows sorted voxel ids, so the result is deterministic.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must be (M, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise DataError("empty point cloud")
    if stride <= 0:
        raise ConfigError(f"voxel stride must be positive, got {stride}")
    inten = np.zeros(len(pts)) if intensity is None else np.asarray(intensity, dtype=np.float64)
    if inten.shape != (len(pts),):
        raise DataError(f"intensity must be (M,), got {inten.shape}")

    ids = np.floor(pts / stride).astype(np.int64)
    # lexicographic voxel key -> groups in deterministic order
    order = np.lexsort((ids[:, 2], ids[:, 1], ids[:, 0]))
    ids_sorted = ids[order]
    boundaries = np.flatnonzero(np.any(np.diff(ids_sorted, axis=0) != 0, axis=1)) + 1
    groups = np.split(order, boundaries)

    centroids = np.zeros((len(groups), 3))
    stats = np.zeros((len(groups), _STATS_DIM))
    for g, members in enumerate(groups):
        p = pts[members]
        i = inten[members]
        c = p.mean(axis=0)
        centroids[g] = c
        corner = np.floor(c / stride) * stride
        spread = p.var(axis=0) / (stride * stride)
        stats[g] = np.concatenate([
            [np.log1p(len(members)), i.mean(), i.std()],
            (c - corner) / stride,
            spread,
        ])
    return centroids, stats


class PointTokenizer(Module):
    """Voxel pooling, a stats MLP, and two rotary self-attention blocks.

    ``stride`` is a fraction of the cloud diameter: token granularity scales
    with the scene. Token coordinates are the voxel centroids, a function of
    the geometry only.
    """

    def __init__(self, stride: float, d_enc: int, rng: np.random.Generator,
                 heads: int = 4, depth: int = 2,
                 rope_base: float = 100.0, rope_scale: float = 2.0 * np.pi):
        if not (0.0 < stride < 1.0):
            raise ConfigError(f"normalized voxel stride must be in (0, 1), got {stride}")
        self.stride = stride
        self.embed = MLP([_STATS_DIM, 2 * d_enc, d_enc], rng)
        self.blocks = [SelfAttnBlock(d_enc, heads, rng, rope_base, rope_scale)
                       for _ in range(depth)]

    def __call__(self, points: np.ndarray, intensity: np.ndarray | None = None) -> TokenField:
        pts = np.asarray(points, dtype=np.float64)
        frame = CoordFrame.for_cloud(pts)
        norm = frame.normalize(pts)
        cent_norm, stats = voxel_pool(norm, intensity, self.stride)
        coords = frame.denormalize(cent_norm)
        x = self.embed(Tensor(stats))
        for blk in self.blocks:
            x = blk(x, cent_norm)
        return TokenField(features=x, coords=coords, frame=frame, grid=None)


# -- upsampling --------------------------------------------------------


class ImageUpsampler(Module):
    """Channel expansion + pixel shuffle: token grid refined by ``ratio``."""

    def __init__(self, ratio: int, d_enc: int, d_out: int, rng: np.random.Generator):
        if ratio not in VALID_UPSAMPLE_RATIOS:
            raise ConfigError(f"ratio must be one of {VALID_UPSAMPLE_RATIOS}, got {ratio}")
        self.ratio = ratio
        self.d_out = d_out
        self.mlp = MLP([d_enc, d_enc, ratio * ratio * d_out], rng)

    def __call__(self, field: TokenField) -> TokenField:
        if field.grid is None:
            raise ConfigError("image upsampling needs a token grid")
        r = self.ratio
        if r > min(field.grid.spacing):
            raise ConfigError(
                f"upsample ratio {r} exceeds token spacing {field.grid.spacing}"
            )
        rows, cols = field.grid.shape
        d = self.d_out
        x = self.mlp(field.features)                       # (rows*cols, r*r*d)
        x = T.reshape(x, (rows, cols, r, r, d))
        x = T.transpose(x, (0, 2, 1, 3, 4))                # (rows, r, cols, r, d)
        x = T.reshape(x, (rows * r * cols * r, d))
        sx, sy = field.grid.spacing
        new_grid = GridInfo(
            shape=(rows * r, cols * r),
            origin=(field.grid.origin[0] - sx / 2 + sx / (2 * r),
                    field.grid.origin[1] - sy / 2 + sy / (2 * r)),
            spacing=(sx / r, sy / r),
        )
        return TokenField(features=x, coords=grid_coords(new_grid),
                          frame=field.frame, grid=new_grid)


class PointUpsampler(Module):
    """Inverse-distance interpolation of token features back onto points."""

    def __init__(self, d_enc: int, d_out: int, rng: np.random.Generator, k: int = 3):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        self.k = k
        self.proj = Linear(d_enc, d_out, rng)

    def __call__(self, field: TokenField, point_coords: np.ndarray) -> TokenField:
        pts = np.asarray(point_coords, dtype=np.float64)
        norm_pts = field.frame.normalize(pts)
        k = min(self.k, field.count)
        tree = cKDTree(field.norm_coords)
        dist, idx = tree.query(norm_pts, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        # 1/(d + eps): a coincident token dominates with weight ~1
        w = 1.0 / (dist + 1e-12)
        w = w / w.sum(axis=1, keepdims=True)
        gathered = T.index_select(field.features, idx.ravel(), axis=0)
        gathered = T.reshape(gathered, (len(pts), k, field.features.shape[1]))
        mixed = T.tsum(T.mul(gathered, w[:, :, None]), axis=1)
        return TokenField(features=self.proj(mixed), coords=pts,
                          frame=field.frame, grid=None)


# -- descriptor extraction --------------------------------------------


def extract_bilinear(field: TokenField, keypoints: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Bilinear sample of a grid field at (x, y) raw-unit keypoints.

    Returns (features, clamped): ``clamped`` flags keypoints outside the
    grid footprint whose sample position was clipped to the border.
    """
    if field.grid is None:
        raise ConfigError("bilinear extraction needs a token grid")
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise DataError(f"keypoints must be (N, 2), got {kps.shape}")
    rows, cols = field.grid.shape
    fx = (kps[:, 0] - field.grid.origin[0]) / field.grid.spacing[0]
    fy = (kps[:, 1] - field.grid.origin[1]) / field.grid.spacing[1]
    clamped = (fx < -0.5) | (fx > cols - 0.5) | (fy < -0.5) | (fy > rows - 0.5)
    fx = np.clip(fx, 0.0, cols - 1.0)
    fy = np.clip(fy, 0.0, rows - 1.0)
    x0 = np.floor(fx).astype(np.intp)
    y0 = np.floor(fy).astype(np.intp)
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    wx = fx - x0
    wy = fy - y0

    def take(yy, xx):
        return T.index_select(field.features, yy * cols + xx, axis=0)

    w00 = ((1 - wx) * (1 - wy))[:, None]
    w01 = (wx * (1 - wy))[:, None]
    w10 = ((1 - wx) * wy)[:, None]
    w11 = (wx * wy)[:, None]
    out = T.add(
        T.add(T.mul(take(y0, x0), w00), T.mul(take(y0, x1), w01)),
        T.add(T.mul(take(y1, x0), w10), T.mul(take(y1, x1), w11)),
    )
    return out, clamped


def extract_knn_gaussian(field: TokenField, keypoints: np.ndarray,
                         log_sigma: Parameter, k: int = 4) -> tuple[Tensor, np.ndarray]:
    """Gaussian-weighted k-nearest-neighbor sample of a point field.

    Weights are softmax(-d^2 / (2 sigma^2)) over the k neighbors with
    sigma = exp(log_sigma) learnable; distances are in normalized units.
    Keypoints farther than one diameter from every token are flagged.
    """
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != field.coords.shape[1]:
        raise DataError(f"keypoints must be (N, {field.coords.shape[1]}), got {kps.shape}")
    k = min(k, field.count)
    norm_kps = field.frame.normalize(kps)
    tree = cKDTree(field.norm_coords)
    dist, idx = tree.query(norm_kps, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    clamped = dist.min(axis=1) > 1.0

    inv_two_sigma_sq = T.mul(T.exp(T.mul(log_sigma, -2.0)), 0.5)     # scalar tensor
    logits = T.mul(T.mul(Tensor(dist * dist), -1.0), inv_two_sigma_sq)
    weights = T.softmax(logits)                                      # (N, k)
    gathered = T.index_select(field.features, idx.ravel(), axis=0)
    gathered = T.reshape(gathered, (len(kps), k, field.features.shape[1]))
    out = T.tsum(T.mul(gathered, T.reshape(weights, (len(kps), k, 1))), axis=1)
    return out, clamped
