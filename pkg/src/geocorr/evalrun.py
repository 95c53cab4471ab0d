"""Dataset-level evaluation: runs a predictor over sample pairs and folds
per-pair results into the task metric blocks.

3D thresholds and registration residuals are handled in scene-diameter
units so one fractional threshold serves scenes of any physical size;
EPE stays in native units (pixels for images, scene units for clouds).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import se3_apply, se3_inverse
from .metrics import (RegistrationResult, confidence_keep, cycle_filter, epe,
                      fmr, inlier_ratio, ransac_register, registration_recall)
from .model import CorrespondenceModel
from .synthdata import TrainSample
from .tokenizers import CoordFrame


@dataclass(frozen=True)
class EvalOptions:
    conf_percentile: float = 0.0   # 0 keeps everything
    cycle: bool = False
    ransac_iters: int = 512
    seed: int = 0
    tau_2d_px: float = 3.0         # inlier radius for image targets
    tau_3d_frac: float = 0.05      # inlier radius, fraction of scene diameter
    tau_rr_frac: float = 0.1       # RMSE recall bound, fraction of diameter
    tau_fmr: float = 0.05
    tau_cycle: float = 0.02        # round-trip bound in normalized units

    def __post_init__(self):
        for name in ("tau_2d_px", "tau_3d_frac", "tau_rr_frac", "tau_fmr",
                     "tau_cycle"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.conf_percentile < 100.0):
            raise ConfigError("conf_percentile must be in [0, 100)")


def model_predictor(model: CorrespondenceModel):
    def predict(sample: TrainSample):
        out = model(sample)
        return np.array(out.pred.data), np.array(out.conf.data).reshape(-1)
    return predict


def oracle_predictor(sample: TrainSample):
    """Ground-truth passthrough; pins the metric plumbing to IR = 1.0."""
    n = len(sample.kps_tgt)
    return np.asarray(sample.kps_tgt, dtype=np.float64).copy(), np.full(n, 2.0)


def source_frame(sample: TrainSample) -> CoordFrame:
    src = np.asarray(sample.source)
    if sample.task in ("2d2d", "2d3d"):
        h, w = src.shape[:2]
        return CoordFrame.for_image(w, h)
    return CoordFrame.for_cloud(src)


def reversed_sample(sample: TrainSample, queries: np.ndarray) -> TrainSample | None:
    """Swap the two observations so the model matches back toward the source.

    The image-cloud task has no mirrored path through the model, so it
    cannot be cycle-checked and returns None.
    """
    if sample.task == "2d2d":
        return TrainSample(task="2d2d", source=sample.target,
                           target=sample.source, kps_src=queries,
                           kps_tgt=sample.kps_src, mask=sample.mask,
                           transform=np.linalg.inv(sample.transform),
                           seed=sample.seed)
    if sample.task == "3d3d":
        return TrainSample(task="3d3d", source=sample.target,
                           target=sample.source, kps_src=queries,
                           kps_tgt=sample.kps_src, mask=sample.mask,
                           transform=se3_inverse(sample.transform),
                           source_intensity=sample.target_intensity,
                           target_intensity=sample.source_intensity,
                           seed=sample.seed)
    return None


def _pair_filters(predict, sample, pred, conf, opts: EvalOptions):
    keep = confidence_keep(conf, opts.conf_percentile)
    if opts.cycle:
        back = reversed_sample(sample, pred)
        if back is not None:
            roundtrip, _ = predict(back)
            frame = source_frame(sample)
            kept = cycle_filter(frame.normalize(sample.kps_src),
                                frame.normalize(roundtrip), opts.tau_cycle)
            cyc = np.zeros(len(pred), dtype=bool)
            cyc[kept] = True
            keep = keep & cyc
    return keep


def _registration_entry(sample, pred, keep, opts: EvalOptions, pair_seed: int):
    """RANSAC pose from kept correspondences, in diameter units."""
    diam = CoordFrame.for_cloud(np.asarray(sample.target)).diameter
    s = 1.0 / diam
    gt_tgt = np.asarray(sample.kps_tgt, dtype=np.float64)
    if sample.task == "3d3d":
        src_pts = np.asarray(sample.kps_src, dtype=np.float64)
        corr_src, corr_tgt = src_pts[keep], pred[keep]
        entry_src = src_pts
    else:
        # image-to-cloud: GT depth lifts the source pixels into the camera
        # frame; predicted world points are registered against that lift
        cam = se3_apply(sample.transform, gt_tgt)
        corr_src, corr_tgt = pred[keep], cam[keep]
        entry_src, gt_tgt = gt_tgt, cam
    r_gt = sample.transform[:3, :3]
    t_gt = sample.transform[:3, 3]
    if len(corr_src) >= 3:
        res = ransac_register(corr_src * s, corr_tgt * s,
                              tau=opts.tau_3d_frac,
                              iters=opts.ransac_iters, seed=pair_seed)
    else:
        res = RegistrationResult(rotation=np.eye(3), translation=np.zeros(3),
                                 rmse=float("inf"), success=False)
    return (res, r_gt, t_gt * s, entry_src * s, gt_tgt * s,
            np.asarray(sample.mask, dtype=bool))


def evaluate_task(predict, samples: list[TrainSample],
                  opts: EvalOptions) -> dict:
    task = samples[0].task
    irs, epes, reg_entries = [], [], []
    for i, sample in enumerate(samples):
        pred, conf = predict(sample)
        keep = _pair_filters(predict, sample, pred, conf, opts)
        eff = np.asarray(sample.mask, dtype=bool) & keep
        gt = np.asarray(sample.kps_tgt, dtype=np.float64)
        if task == "2d2d":
            tau = opts.tau_2d_px
        else:
            tau = opts.tau_3d_frac * CoordFrame.for_cloud(
                np.asarray(sample.target)).diameter
        if eff.any():
            irs.append(inlier_ratio(pred, gt, eff, tau))
            epes.append(epe(pred, gt, eff))
        else:
            irs.append(0.0)          # everything filtered: nothing matched
        if task in ("2d3d", "3d3d"):
            reg_entries.append(_registration_entry(sample, pred, keep, opts,
                                                   opts.seed + i))
    block = {"ir": float(np.mean(irs)), "fmr": fmr(irs, opts.tau_fmr),
             "pairs": len(samples)}
    block["epe"] = float(np.mean(epes)) if epes else None
    if reg_entries:
        block.update(registration_recall(reg_entries, opts.tau_rr_frac))
    return block


def evaluate_dataset(predict, samples: list[TrainSample],
                     opts: EvalOptions) -> dict:
    """Per-task metric blocks for every task present in the sample list."""
    by_task: dict[str, list[TrainSample]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    return {task: evaluate_task(predict, group, opts)
            for task, group in sorted(by_task.items())}
