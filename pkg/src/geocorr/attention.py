"""Attention kernels and the shared multi-head block.

Two row-stochastic kernels over a query/key pair:

* dot-product: softmax(q k^T / sqrt(D))
* distance-based: softmax(-||q_i - k_j||^2 / D), which prefers the nearest
  key in feature space; its single-head argmax is exactly nearest-neighbor
  matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encodings import rope_apply_partial
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor, as_tensor

KINDS = ("vanilla", "gaussian")


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "vanilla"
    heads: int = 1
    embed_dim: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected {KINDS}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )


def vanilla_attention(q, k) -> Tensor:
    """softmax(q k^T / sqrt(D)) rows over keys; (N,D),(M,D) -> (N,M)."""
    q, k = as_tensor(q), as_tensor(k)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError("vanilla_attention", q.shape, k.shape)
    scale = 1.0 / np.sqrt(q.shape[1])
    return T.softmax(T.mul(T.matmul(q, T.transpose(k)), scale))


def gaussian_attention(q, k) -> Tensor:
    """softmax(-||q_i - k_j||^2 / D) rows over keys; (N,D),(M,D) -> (N,M)."""
    q, k = as_tensor(q), as_tensor(k)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError("gaussian_attention", q.shape, k.shape)
    logits = T.mul(T.pairwise_sqdist(q, k), -1.0 / q.shape[1])
    return T.softmax(logits)


def attention_matrix(kind: str, q, k) -> Tensor:
    if kind == "vanilla":
        return vanilla_attention(q, k)
    if kind == "gaussian":
        return gaussian_attention(q, k)
    raise ConfigError(f"unknown attention kind {kind!r}")


def attend(attn, values) -> Tensor:
    """Weighted mixture of value rows, (N,M) @ (M,Dv)."""
    attn, values = as_tensor(attn), as_tensor(values)
    if attn.ndim != 2 or values.ndim != 2 or attn.shape[1] != values.shape[0]:
        raise ShapeError("attend", attn.shape, values.shape)
    return T.matmul(attn, values)


class MultiHeadAttention(Module):
    """Projection + per-head kernel + output merge.

    When rope coordinates are supplied, queries and keys are rotated per
    head before the kernel (partial rotation if the head width is not a
    multiple of 2*coord_dim). ``zero_out`` starts the output projection at
    zero so a residual branch is initially silent.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 rope_base: float = 100.0, rope_scale: float = 2.0 * np.pi,
                 zero_out: bool = False):
        self.cfg = cfg
        d = cfg.embed_dim
        self.w_q = Linear(d, d, rng, bias=False)
        self.w_k = Linear(d, d, rng, bias=False)
        self.w_v = Linear(d, d, rng, bias=False)
        self.w_o = Linear(d, d, rng, bias=False, init="zero" if zero_out else "xavier")
        self.rope_base = rope_base
        self.rope_scale = rope_scale

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 q_coords=None, k_coords=None) -> Tensor:
        cfg = self.cfg
        dh = cfg.embed_dim // cfg.heads
        q = self.w_q(q_in)
        k = self.w_k(k_in)
        v = self.w_v(v_in)
        outs = []
        for h in range(cfg.heads):
            cols = np.arange(h * dh, (h + 1) * dh)
            qh = T.index_select(q, cols, axis=1)
            kh = T.index_select(k, cols, axis=1)
            vh = T.index_select(v, cols, axis=1)
            if q_coords is not None:
                m = np.asarray(q_coords if not isinstance(q_coords, Tensor) else q_coords.data).shape[1]
                qh = rope_apply_partial(qh, q_coords, m, self.rope_base, self.rope_scale)
            if k_coords is not None:
                m = np.asarray(k_coords if not isinstance(k_coords, Tensor) else k_coords.data).shape[1]
                kh = rope_apply_partial(kh, k_coords, m, self.rope_base, self.rope_scale)
            a = attention_matrix(cfg.kind, qh, kh)
            outs.append(attend(a, vh))
        merged = T.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        return self.w_o(merged)
