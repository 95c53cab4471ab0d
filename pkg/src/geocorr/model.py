"""End-to-end correspondence model: tokenize, fuse, upsample, match.

One model instance serves all three task pairings (image-image,
image-cloud, cloud-cloud) by dispatching each observation to its
modality tokenizer; everything after tokenization is modality-agnostic.
The decoder works in normalized target-frame coordinates so the three
tasks share loss scales; predictions are denormalized at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import (ConfidenceHead, DecoderConfig, DecoderResult,
                      MatchingDecoder)
from .encodings import AffineCoordCode
from .errors import ConfigError, DataError
from .fusion import FusionConfig, FusionEncoder
from . import tensor as T
from .losses import (LossConfig, TaskLoss, loss_aux, loss_conf, loss_desc)
from .nn import LayerNorm, Module, Parameter
from .synthdata import TrainSample
from .tensor import Tensor
from .tokenizers import (ImageTokenizer, ImageUpsampler, PointTokenizer,
                         PointUpsampler, TokenField, extract_bilinear,
                         extract_knn_gaussian)


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 128               # token width through the fusion encoder
    d_model: int = 256             # width after upsampling, decoder width
    fusion_depth: int = 4
    fusion_heads: int = 8
    decoder_layers: int = 3
    decoder_heads: int = 1
    attention: str = "gaussian"
    patch: int = 8
    upsample: int = 4
    point_stride: float = 0.08     # voxel edge, fraction of cloud diameter
    knn: int = 4
    tokenizer_heads: int = 4
    qk_gain: float = 2.0           # decoder query/key start scale

    def __post_init__(self):
        if self.d_model < 3:
            raise ConfigError("d_model must be at least the largest coord dim (3)")
        if self.attention not in ("gaussian", "vanilla"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if not (0.0 < self.point_stride < 1.0):
            raise ConfigError("point_stride must be in (0, 1)")
        if self.knn < 1:
            raise ConfigError("knn must be >= 1")


@dataclass
class ModelOutput:
    task: str
    result: DecoderResult          # per-layer history is in normalized units
    tgt_field: TokenField
    pred_norm: Tensor              # (N, m) normalized target coords
    pred: Tensor                   # (N, m) target-frame units
    conf: Tensor                   # (N, 1), > 1 by construction
    desc_src: Tensor               # (N, D) descriptors at GT source keypoints
    desc_tgt: Tensor               # (N, D) descriptors at GT target keypoints
    gt_norm: np.ndarray
    clamped_src: np.ndarray        # queries that fell outside the source extent
    clamped_tgt: np.ndarray


class CorrespondenceModel(Module):
    """Shared trunk for the three correspondence tasks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.image_tok = ImageTokenizer(cfg.patch, cfg.d_enc, rng,
                                        heads=cfg.tokenizer_heads)
        self.point_tok = PointTokenizer(cfg.point_stride, cfg.d_enc, rng,
                                        heads=cfg.tokenizer_heads)
        self.fusion = FusionEncoder(FusionConfig(dim=cfg.d_enc,
                                                 depth=cfg.fusion_depth,
                                                 heads=cfg.fusion_heads), rng)
        self.image_up = ImageUpsampler(cfg.upsample, cfg.d_enc, cfg.d_model, rng)
        self.point_up = PointUpsampler(cfg.d_enc, cfg.d_model, rng)
        # terminal norms pin the fine-feature scale the decoder kernel sees;
        # without them the squared-distance logits collapse toward uniform
        self.fine_norm_img = LayerNorm(cfg.d_model)
        self.fine_norm_pt = LayerNorm(cfg.d_model)
        self.decoder = MatchingDecoder(DecoderConfig(layers=cfg.decoder_layers,
                                                     heads=cfg.decoder_heads,
                                                     dim=cfg.d_model,
                                                     kind=cfg.attention,
                                                     qk_gain=cfg.qk_gain), rng)
        self.pe2 = AffineCoordCode(2, cfg.d_model, rng)
        self.pe3 = AffineCoordCode(3, cfg.d_model, rng)
        self.conf_head = ConfidenceHead(cfg.d_model, rng)
        # Gaussian-extraction width: weight 0.5 at one voxel stride, the
        # expected neighbor distance in normalized units
        sigma0 = cfg.point_stride / np.sqrt(2.0 * np.log(2.0))
        self.log_sigma = Parameter(np.log(sigma0))

    # -- per-modality plumbing ----------------------------------------

    def _tokenize(self, sample: TrainSample) -> tuple[TokenField, TokenField]:
        if sample.task == "2d2d":
            return self.image_tok(sample.source), self.image_tok(sample.target)
        if sample.task == "2d3d":
            return (self.image_tok(sample.source),
                    self.point_tok(sample.target, sample.target_intensity))
        if sample.task == "3d3d":
            return (self.point_tok(sample.source, sample.source_intensity),
                    self.point_tok(sample.target, sample.target_intensity))
        raise ConfigError(f"unknown task {sample.task!r}")

    def _upsample(self, field: TokenField, raw) -> TokenField:
        if field.grid is not None:
            out, norm = self.image_up(field), self.fine_norm_img
        else:
            out, norm = self.point_up(field, np.asarray(raw)), self.fine_norm_pt
        return TokenField(features=norm(out.features), coords=out.coords,
                          frame=out.frame, grid=out.grid)

    def _extract(self, field: TokenField, kps: np.ndarray):
        if field.grid is not None:
            return extract_bilinear(field, kps)
        return extract_knn_gaussian(field, kps, self.log_sigma, k=self.cfg.knn)

    def positional_code(self, coord_dim: int) -> AffineCoordCode:
        if coord_dim == 2:
            return self.pe2
        if coord_dim == 3:
            return self.pe3
        raise ConfigError(f"no positional code for {coord_dim}-dim coordinates")

    # -- forward ------------------------------------------------------

    def __call__(self, sample: TrainSample) -> ModelOutput:
        kps_src = np.asarray(sample.kps_src, dtype=np.float64)
        kps_tgt = np.asarray(sample.kps_tgt, dtype=np.float64)
        if len(kps_src) != len(kps_tgt):
            raise DataError(
                f"keypoint count mismatch: {len(kps_src)} vs {len(kps_tgt)}")
        src_tok, tgt_tok = self._tokenize(sample)
        src_fused, tgt_fused = self.fusion(src_tok, tgt_tok)
        src_fine = self._upsample(src_fused, sample.source)
        tgt_fine = self._upsample(tgt_fused, sample.target)

        f_k0, clamped_src = self._extract(src_fine, kps_src)
        pe = self.positional_code(tgt_fine.coords.shape[1])
        result = self.decoder(f_k0, tgt_fine, pe)
        pred_norm = result.estimate
        pred = tgt_fine.frame.denormalize_t(pred_norm)
        conf = self.conf_head(result.appearance)
        desc_tgt, clamped_tgt = self._extract(tgt_fine, kps_tgt)
        return ModelOutput(task=sample.task, result=result, tgt_field=tgt_fine,
                           pred_norm=pred_norm, pred=pred, conf=conf,
                           desc_src=f_k0, desc_tgt=desc_tgt,
                           gt_norm=tgt_fine.frame.normalize(kps_tgt),
                           clamped_src=clamped_src, clamped_tgt=clamped_tgt)


def unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Project each row onto the unit sphere (differentiably)."""
    norm = T.sqrt(T.add(T.tsum(T.mul(x, x), axis=1, keepdims=True), eps))
    return T.div(x, norm)


def compute_task_loss(out: ModelOutput, sample: TrainSample,
                      cfg: LossConfig) -> TaskLoss:
    """Assemble the per-task objective from one forward pass.

    All coordinate terms are in normalized target-frame units, which keeps
    the default temperatures and weights meaningful across modalities. The
    contrastive term runs on unit-length descriptors so distances live in
    [0, 2] where the default temperature operates, and shrinking feature
    norms cannot masquerade as progress.
    """
    mask = np.asarray(sample.mask, dtype=bool)
    conf = loss_conf(out.pred_norm, out.conf, out.gt_norm, mask, cfg.alpha)
    aux = loss_aux(out.result.history, out.gt_norm, mask, cfg.gamma)
    desc = loss_desc(unit_rows(out.desc_src), unit_rows(out.desc_tgt),
                     unit_rows(out.result.appearance), cfg.tau, mask)
    return TaskLoss(conf=conf, aux=aux, desc=desc)
