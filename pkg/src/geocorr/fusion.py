"""Two-field fusion encoder: interleaved self- and cross-attention.

One set of block weights serves both fields, and each block computes both
directions from the same frozen inputs, so fuse(a, b) and fuse(b, a) are
exact mirrors. Self-attention sees rotary phases from the field's own
normalized coordinates; cross-attention is deliberately position-free so
matching is driven by appearance. Cross output projections start at zero:
at initialization the two fields pass through uncoupled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention
from .errors import ConfigError
from .nn import MLP, LayerNorm, Module
from .tensor import Tensor
from .tokenizers import TokenField


@dataclass(frozen=True)
class FusionConfig:
    dim: int = 128
    depth: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    rope_base: float = 100.0
    rope_scale: float = 2.0 * np.pi

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"fusion depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


class FusionBlock(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        d = cfg.dim
        attn_cfg = AttentionConfig(kind="vanilla", heads=cfg.heads, embed_dim=d)
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(attn_cfg, rng, cfg.rope_base, cfg.rope_scale)
        self.cross_norm_q = LayerNorm(d)
        self.cross_norm_kv = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(attn_cfg, rng, zero_out=True)
        self.mlp_norm = LayerNorm(d)
        self.mlp = MLP([d, cfg.mlp_ratio * d, d], rng)

    def __call__(self, a: Tensor, ca: np.ndarray, b: Tensor, cb: np.ndarray):
        # self attention, each field on its own coordinates
        ha = self.self_norm(a)
        hb = self.self_norm(b)
        a = T.add(a, self.self_attn(ha, ha, ha, q_coords=ca, k_coords=ca))
        b = T.add(b, self.self_attn(hb, hb, hb, q_coords=cb, k_coords=cb))
        # both cross directions from the same frozen inputs, no positions
        qa = self.cross_norm_q(a)
        qb = self.cross_norm_q(b)
        kva = self.cross_norm_kv(a)
        kvb = self.cross_norm_kv(b)
        a = T.add(a, self.cross_attn(qa, kvb, kvb))
        b = T.add(b, self.cross_attn(qb, kva, kva))
        a = T.add(a, self.mlp(self.mlp_norm(a)))
        b = T.add(b, self.mlp(self.mlp_norm(b)))
        return a, b


class FusionEncoder(Module):
    """Stack of shared-weight fusion blocks plus a final normalization."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [FusionBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(cfg.dim)

    def __call__(self, src: TokenField, tgt: TokenField) -> tuple[TokenField, TokenField]:
        if src.features.shape[1] != self.cfg.dim or tgt.features.shape[1] != self.cfg.dim:
            raise ConfigError(
                f"fusion expects {self.cfg.dim}-dim fields, got "
                f"{src.features.shape[1]} and {tgt.features.shape[1]}"
            )
        a, b = src.features, tgt.features
        ca, cb = src.norm_coords, tgt.norm_coords
        for blk in self.blocks:
            a, b = blk(a, ca, b, cb)
        a = self.final_norm(a)
        b = self.final_norm(b)
        out_src = TokenField(features=a, coords=src.coords, frame=src.frame, grid=src.grid)
        out_tgt = TokenField(features=b, coords=tgt.coords, frame=tgt.frame, grid=tgt.grid)
        return out_src, out_tgt
