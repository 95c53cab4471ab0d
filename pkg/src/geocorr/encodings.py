"""Coordinate-aware encodings.

Two mechanisms live here:

* multi-axis rotary embedding: channels are split into one group per
  coordinate axis and each group is rotated by phases proportional to that
  axis value. Rotations are isometries, and the attention logit between a
  rotated query and key depends only on the coordinate difference.
* an affine coordinate code: coords -> W c + b with full column rank, so the
  exact coordinate is recoverable from the code by a least-squares solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class RopeConfig:
    coord_dim: int            # number of coordinate axes (2 or 3 here)
    head_dim: int             # channels being rotated
    base: float = 100.0       # frequency spacing between channel pairs
    coord_scale: float = 2.0 * np.pi  # phase per unit coordinate at the fastest pair

    def __post_init__(self):
        if self.coord_dim < 1:
            raise ConfigError(f"coord_dim must be >= 1, got {self.coord_dim}")
        if self.head_dim <= 0 or self.head_dim % (2 * self.coord_dim) != 0:
            raise ConfigError(
                f"head_dim {self.head_dim} must be a positive multiple of "
                f"2*coord_dim = {2 * self.coord_dim}"
            )
        if self.base <= 1.0:
            raise ConfigError(f"rope base must exceed 1, got {self.base}")

    @property
    def group_dim(self) -> int:
        return self.head_dim // self.coord_dim

    def frequencies(self) -> np.ndarray:
        """Per-pair angular frequencies within one axis group (fast to slow)."""
        half = self.group_dim // 2
        j = np.arange(half, dtype=np.float64)
        return self.coord_scale * self.base ** (-j / max(1, half))


def rope_apply(features, coords, cfg: RopeConfig) -> Tensor:
    """Rotate features by their coordinates.

    features: (N, head_dim); coords: (N, coord_dim). Either may carry
    gradients; the rotation phases are differentiable in the coordinates,
    which matters when the coordinates are themselves model estimates.

    Within the group for axis a, channel pair (j, j + group_dim/2) is rotated
    by angle freq_j * coord_a, so each pair's norm is preserved and
    q(x) . k(y) depends on x - y only.
    """
    f = as_tensor(features)
    c = as_tensor(coords)
    if f.ndim != 2 or f.shape[1] != cfg.head_dim:
        raise ConfigError(
            f"rope_apply: features have {f.shape}, expected (N, {cfg.head_dim})"
        )
    if c.ndim != 2 or c.shape[1] != cfg.coord_dim or c.shape[0] != f.shape[0]:
        raise ConfigError(
            f"rope_apply: coords have {c.shape}, expected ({f.shape[0]}, {cfg.coord_dim})"
        )
    g = cfg.group_dim
    half = g // 2
    freqs = cfg.frequencies()  # (half,)

    out_blocks = []
    for axis in range(cfg.coord_dim):
        block = T.index_select(f, np.arange(axis * g, (axis + 1) * g), axis=1)
        x1 = T.index_select(block, np.arange(half), axis=1)
        x2 = T.index_select(block, np.arange(half, g), axis=1)
        axis_coord = T.index_select(c, [axis], axis=1)          # (N, 1)
        phases = T.mul(axis_coord, freqs[None, :])              # (N, half) by broadcast
        cos_p = T.cos(phases)
        sin_p = T.sin(phases)
        r1 = T.sub(T.mul(x1, cos_p), T.mul(x2, sin_p))
        r2 = T.add(T.mul(x1, sin_p), T.mul(x2, cos_p))
        out_blocks.append(T.concat([r1, r2], axis=1))
    return T.concat(out_blocks, axis=1) if len(out_blocks) > 1 else out_blocks[0]


def rope_apply_partial(features, coords, coord_dim: int, base: float,
                       coord_scale: float) -> Tensor:
    """Rotate the largest leading subspace divisible by 2*coord_dim.

    Lets one channel width serve coordinate spaces of different dimension
    (e.g. 256 channels with 3 axes): leftover channels pass through, which
    keeps both the isometry and the relative-phase property exact.
    """
    f = as_tensor(features)
    dim = f.shape[1]
    rot = (dim // (2 * coord_dim)) * (2 * coord_dim)
    if rot == 0:
        raise ConfigError(
            f"rope_apply_partial: {dim} channels cannot host {coord_dim}-axis rotation"
        )
    cfg = RopeConfig(coord_dim=coord_dim, head_dim=rot, base=base, coord_scale=coord_scale)
    if rot == dim:
        return rope_apply(f, coords, cfg)
    head = T.index_select(f, np.arange(rot), axis=1)
    tail = T.index_select(f, np.arange(rot, dim), axis=1)
    return T.concat([rope_apply(head, coords, cfg), tail], axis=1)


class AffineCoordCode(Module):
    """Invertible-by-least-squares affine lift of coordinates into feature space.

    encode(c) = c @ W^T + b with W of shape (code_dim, coord_dim); decode
    solves the normal equations, which equals the pseudo-inverse solution for
    full column rank and is differentiable through W via a small matrix
    inverse. A cached numpy pseudo-inverse is kept for gradient-free
    consumers and refreshed lazily when the optimizer touches W.
    """

    def __init__(self, coord_dim: int, code_dim: int, rng: np.random.Generator):
        if code_dim < coord_dim:
            raise ConfigError(
                f"code_dim {code_dim} must be at least coord_dim {coord_dim}"
            )
        # orthonormal columns: smallest singular value is exactly 1
        a = rng.standard_normal((code_dim, coord_dim))
        q, _ = np.linalg.qr(a)
        self.weight = Parameter(q)                  # (code_dim, coord_dim)
        self.bias = Parameter(np.zeros(code_dim))
        self.coord_dim = coord_dim
        self.code_dim = code_dim
        self._pinv = None
        self._pinv_version = -1
        self._validate(self.weight.data)

    @staticmethod
    def _validate(w: np.ndarray):
        smin = np.linalg.svd(w, compute_uv=False)[-1]
        if smin <= 1e-8:
            raise GeometryError(
                f"coordinate code weight is rank deficient (sigma_min={smin:.3e})"
            )

    def encode(self, coords) -> Tensor:
        """(N, coord_dim) -> (N, code_dim)."""
        c = as_tensor(coords)
        if c.ndim != 2 or c.shape[1] != self.coord_dim:
            raise ConfigError(f"encode: coords {c.shape}, expected (N, {self.coord_dim})")
        return T.add(T.matmul(c, T.transpose(self.weight)), self.bias)

    def decode(self, codes) -> Tensor:
        """(N, code_dim) -> (N, coord_dim), least-squares in the code space."""
        e = as_tensor(codes)
        if e.ndim != 2 or e.shape[1] != self.code_dim:
            raise ConfigError(f"decode: codes {e.shape}, expected (N, {self.code_dim})")
        centered = T.sub(e, self.bias)
        gram = T.matmul(T.transpose(self.weight), self.weight)   # (m, m)
        return T.matmul(T.matmul(centered, self.weight), T.mat_inv(gram))

    @property
    def pinv(self) -> np.ndarray:
        """Cached (coord_dim, code_dim) pseudo-inverse of the weight."""
        if self._pinv is None or self._pinv_version != self.weight.version:
            self._validate(self.weight.data)
            self._pinv = np.linalg.pinv(self.weight.data)
            self._pinv_version = self.weight.version
        return self._pinv

    def check_invariants(self, atol: float = 1e-8):
        resid = np.abs(self.pinv @ self.weight.data - np.eye(self.coord_dim)).max()
        if resid > atol:
            raise GeometryError(f"pinv @ W deviates from identity by {resid:.3e}")
