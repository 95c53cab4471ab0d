"""Dual-stream matching decoder.

Each layer carries two parallel states for the query set: an appearance
stream F_k that accumulates residual feature updates, and a position state
P_k holding the current attention readout of the target coordinate codes.
One attention matrix per layer serves both streams: it mixes projected
target features into F_k and target coordinate codes into P_k, and the
coordinate estimate at every layer is the affine decode of P_k.

Queries rotate by their previous-layer coordinate estimates, keys by the
target token coordinates, so attention depends on relative offsets only.
The first layer has no meaningful estimate yet (the position state starts
at zero) and attends on features alone; translating the target therefore
shifts every per-layer estimate by exactly the same amount.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import attention_matrix
from .encodings import AffineCoordCode, rope_apply_partial
from .errors import ConfigError, NumericsError
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor
from .tokenizers import TokenField

ATTENTION_KINDS = ("gaussian", "vanilla")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 5
    heads: int = 1
    dim: int = 256
    kind: str = "gaussian"
    mlp_ratio: int = 4
    rope_base: float = 100.0
    rope_scale: float = 2.0 * np.pi
    # start scale of the query/key projections under the squared-distance
    # kernel; on unit-scale inputs a gain g widens the logit range from
    # [-4, 0] to [-4g^2, 0], which softmax over ~1e3 tokens needs to
    # sharpen within an optimizer's reach
    qk_gain: float = 2.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"decoder needs at least 1 layer, got {self.layers}")
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.qk_gain <= 0:
            raise ConfigError(f"qk_gain must be positive, got {self.qk_gain}")


@dataclass
class DecoderResult:
    appearance: Tensor                 # (N, D) final F_k
    position: Tensor                   # (N, D) final P_k
    history: list = field(default_factory=list)   # per-layer (N, m) estimates
    attn: list = field(default_factory=list)      # per-layer (N, T) numpy copies

    @property
    def estimate(self) -> Tensor:
        return self.history[-1]


def position_readout(attn, codes, pe: AffineCoordCode) -> Tensor:
    """Decode the attention-weighted coordinate codes into coordinates.

    A row-stochastic attn turns codes of target positions into a convex
    combination, and the affine decode maps it back; a one-hot row returns
    the matched token's coordinates exactly.
    """
    return pe.decode(T.matmul(as_t(attn), as_t(codes)))


def as_t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        # queries/keys start as raw descriptor similarity; value and FFN
        # branches start silent so the untrained decoder is a pure readout
        self.w_q = Linear(d, d, rng, bias=False, init="identity")
        self.w_k = Linear(d, d, rng, bias=False, init="identity")
        if cfg.kind == "gaussian":
            # dot-product logits already span O(sqrt(d)) at unit gain
            self.w_q.weight.data *= cfg.qk_gain
            self.w_k.weight.data *= cfg.qk_gain
        self.w_v = Linear(d, d, rng, bias=False, init="zero")
        self.ffn_norm = LayerNorm(d)
        self.ffn = MLP([d, cfg.mlp_ratio * d, d], rng, final_init="zero")

    def attention(self, f_k: Tensor, f_t: Tensor, q_coords, k_coords,
                  layer_index: int) -> Tensor:
        cfg = self.cfg
        m = k_coords.shape[1]
        q = self.w_q(f_k)
        k = self.w_k(f_t)
        dh = cfg.dim // cfg.heads
        per_head = []
        for h in range(cfg.heads):
            sel = np.arange(h * dh, (h + 1) * dh)
            qh = T.index_select(q, sel, axis=1)
            kh = T.index_select(k, sel, axis=1)
            if q_coords is not None:
                qh = rope_apply_partial(qh, q_coords, m, cfg.rope_base, cfg.rope_scale)
                kh = rope_apply_partial(kh, k_coords, m, cfg.rope_base, cfg.rope_scale)
            a = attention_matrix(cfg.kind, qh, kh)
            if not np.isfinite(a.data).all():
                raise NumericsError(
                    f"decoder layer {layer_index}: non-finite attention"
                )
            per_head.append(a)
        if cfg.heads == 1:
            return per_head[0]
        # averaged row-stochastic matrix keeps the decode semantics
        acc = per_head[0]
        for a in per_head[1:]:
            acc = T.add(acc, a)
        return T.mul(acc, 1.0 / cfg.heads)

    def __call__(self, f_k: Tensor, prev_est, f_t: Tensor, codes: Tensor,
                 x_t: np.ndarray, pe: AffineCoordCode, layer_index: int):
        a = self.attention(f_k, f_t, prev_est, x_t, layer_index)
        # one attention matrix, two value blocks: projected features feed the
        # appearance residual, coordinate codes become the new position state
        f_k = T.add(f_k, T.matmul(a, self.w_v(f_t)))
        f_k = T.add(f_k, self.ffn(self.ffn_norm(f_k)))
        p_k = T.matmul(a, codes)
        est = pe.decode(p_k)
        return f_k, p_k, est, a


class MatchingDecoder(Module):
    """Stack of dual-stream layers with per-layer coordinate history."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, f_k0: Tensor, tgt: TokenField,
                 pe: AffineCoordCode) -> DecoderResult:
        if f_k0.shape[1] != self.cfg.dim or tgt.features.shape[1] != self.cfg.dim:
            raise ConfigError(
                f"decoder expects width {self.cfg.dim}, got query "
                f"{f_k0.shape[1]} and target {tgt.features.shape[1]}"
            )
        x_t = tgt.norm_coords
        codes = pe.encode(x_t)
        f_k = f_k0
        p_k = Tensor(np.zeros((f_k0.shape[0], self.cfg.dim)))
        est = None          # no estimate yet: layer 0 attends on features only
        result = DecoderResult(appearance=f_k, position=p_k)
        for idx, layer in enumerate(self.layers):
            f_k, p_k, est, a = layer(f_k, est, tgt.features, codes, x_t, pe, idx)
            result.history.append(est)
            result.attn.append(np.array(a.data))
        result.appearance = f_k
        result.position = p_k
        return result


class ConfidenceHead(Module):
    """Per-query confidence c = 1 + exp(mlp(f)), always above 1.

    Zero-initialized output layer makes the untrained head emit exactly 2.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP([dim, dim, 1], rng, final_init="zero")

    def __call__(self, f: Tensor) -> Tensor:
        return T.add(T.exp(self.mlp(f)), 1.0)


def predict(result: DecoderResult, conf_head: ConfidenceHead):
    """Final coordinates (last history entry) plus confidences."""
    return result.estimate, conf_head(result.appearance)


def write_heatmaps(result: DecoderResult, tgt: TokenField, out_dir) -> Path:
    """Dump per-layer attention as PGM images plus a JSON index.

    Each layer becomes one grayscale image (rows are queries, columns are
    target tokens, max-normalized). The index records, for every layer and
    query, the coordinate of the highest-attention token.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for layer, a in enumerate(result.attn):
        px = np.zeros_like(a) if a.max() <= 0 else a / a.max()
        px = (px * 255.0).round().astype(np.uint8)
        name = f"attn_layer{layer}.pgm"
        with open(out / name, "wb") as fh:
            fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
            fh.write(px.tobytes())
        top = a.argmax(axis=1)
        for q in range(a.shape[0]):
            index.append({
                "layer": layer,
                "query": int(q),
                "image": name,
                "argmax_token": int(top[q]),
                "argmax_coord": [float(v) for v in tgt.coords[top[q]]],
            })
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=1)
    return out
