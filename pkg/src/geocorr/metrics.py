"""Correspondence metrics and registration oracles.

Everything here is plain numpy on ground-truth-complete inputs: these
functions judge model output, so none of them may depend on the model
internals. Registration quality is reported through rigid alignment
(weighted Kabsch), a minimal-sample consensus wrapper around it, and the
usual recall/ratio metrics from the matching literature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, GeometryError


@dataclass(frozen=True)
class MetricThresholds:
    tau_inlier: float            # px (2D) or scene units (3D)
    tau_fmr: float = 0.05        # min inlier ratio for a pair to count
    tau_rr: float = 0.1          # RMSE bound for registration recall
    tau_cycle: float = 0.02      # round-trip distance, normalized units
    conf_percentile: float = 0.0  # keep predictions above this percentile

    def __post_init__(self):
        for name in ("tau_inlier", "tau_fmr", "tau_rr", "tau_cycle"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.conf_percentile < 100.0):
            raise ConfigError("conf_percentile must be in [0, 100)")


@dataclass
class RegistrationResult:
    rotation: np.ndarray          # (3, 3)
    translation: np.ndarray       # (3,)
    rmse: float
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    success: bool = True

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation


def _check_rotation(r: np.ndarray):
    if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
        raise GeometryError("estimated rotation is not orthonormal")


def kabsch(src: np.ndarray, tgt: np.ndarray, weights=None) -> RegistrationResult:
    """Weighted least-squares rigid alignment tgt ~ R @ src + t.

    Planar sets are fine (the reflection case is handled by flipping the
    smallest singular direction); collinear sets are ambiguous and raise.
    """
    s = np.asarray(src, dtype=np.float64)
    g = np.asarray(tgt, dtype=np.float64)
    if s.shape != g.shape or s.ndim != 2 or s.shape[1] != 3:
        raise DataError(f"kabsch expects matching (K, 3) arrays, got {s.shape} {g.shape}")
    if len(s) < 3:
        raise DataError(f"kabsch needs at least 3 points, got {len(s)}")
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(s),) or (w < 0).any():
        raise DataError("weights must be a nonnegative vector, one per point")
    wsum = w.sum()
    if wsum <= 0:
        raise DataError("all weights are zero")
    w = w / wsum
    cs = w @ s
    cg = w @ g
    ds = s - cs
    dg = g - cg
    cov = (ds * w[:, None]).T @ dg
    u, sig, vt = np.linalg.svd(cov)
    if sig[1] <= 1e-12 * max(sig[0], 1e-30):
        raise GeometryError("degenerate configuration: points are collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    _check_rotation(r)
    t = cg - r @ cs
    resid = s @ r.T + t - g
    rmse = float(np.sqrt(w @ (resid ** 2).sum(axis=1)))
    return RegistrationResult(rotation=r, translation=t, rmse=rmse,
                              inliers=np.arange(len(s)), success=True)


def rotation_error_deg(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    arccos((trace(R1^T R2) - 1) / 2) in exact arithmetic. Near zero that
    expression is dominated by trace rounding (floor ~1e-6 deg), so small
    angles use the identity |R1 - R2|_F = 2 sqrt(2) sin(angle / 2), which
    subtracts nearly-equal entries exactly and keeps full precision.
    """
    r1 = np.asarray(r_est, dtype=np.float64)
    r2 = np.asarray(r_gt, dtype=np.float64)
    fro = float(np.linalg.norm(r1 - r2))
    if fro < 1e-3:
        return float(np.degrees(2.0 * np.arcsin(fro / (2.0 * np.sqrt(2.0)))))
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est) - np.asarray(t_gt)))


def ransac_register(src: np.ndarray, tgt: np.ndarray, tau: float,
                    iters: int = 512, seed: int = 0) -> RegistrationResult:
    """Minimal 3-point hypotheses, consensus scoring, Kabsch refit.

    Deterministic given the seed. When no hypothesis collects 3 inliers the
    result carries success=False and the identity transform.
    """
    s = np.asarray(src, dtype=np.float64)
    g = np.asarray(tgt, dtype=np.float64)
    if len(s) < 3:
        raise DataError(f"registration needs at least 3 correspondences, got {len(s)}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(iters):
        pick = rng.choice(len(s), size=3, replace=False)
        try:
            model = kabsch(s[pick], g[pick])
        except GeometryError:
            continue
        err = np.linalg.norm(model.apply(s) - g, axis=1)
        inliers = np.nonzero(err < tau)[0]
        if len(inliers) > best_count:
            best_count = len(inliers)
            best_inliers = inliers
    if best_inliers is None or best_count < 3:
        return RegistrationResult(rotation=np.eye(3), translation=np.zeros(3),
                                  rmse=float("inf"), success=False)
    refit = kabsch(s[best_inliers], g[best_inliers])
    err = np.linalg.norm(refit.apply(s) - g, axis=1)
    final = np.nonzero(err < tau)[0]
    rmse = float(np.sqrt(np.mean(err[final] ** 2))) if len(final) else float("inf")
    return RegistrationResult(rotation=refit.rotation, translation=refit.translation,
                              rmse=rmse, inliers=final, success=True)


# -- ratio / recall metrics --------------------------------------------


def inlier_ratio(pred: np.ndarray, gt: np.ndarray, mask, tau: float) -> float:
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if idx.size == 0:
        raise DataError("inlier ratio undefined: no visible pairs")
    d = np.linalg.norm(np.asarray(pred)[idx] - np.asarray(gt)[idx], axis=1)
    return float(np.mean(d < tau))


def fmr(irs, tau_fmr: float) -> float:
    vals = np.asarray(list(irs), dtype=np.float64)
    if vals.size == 0:
        raise DataError("feature matching recall undefined: no pairs")
    return float(np.mean(vals > tau_fmr))


def epe(pred: np.ndarray, gt: np.ndarray, mask) -> float:
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if idx.size == 0:
        raise DataError("endpoint error undefined: no visible pairs")
    return float(np.mean(np.linalg.norm(np.asarray(pred)[idx] - np.asarray(gt)[idx], axis=1)))


def registration_recall(entries, tau_rr: float):
    """entries: (result, gt_rotation, gt_translation, src, gt_tgt, mask) per pair.

    A pair is recalled when registration succeeded and the RMSE of the
    estimated transform over GT-visible correspondences is below tau_rr.
    Mean RRE/RTE are reported over recalled pairs.
    """
    entries = list(entries)
    if not entries:
        raise DataError("registration recall undefined: no pairs")
    hits, rres, rtes = [], [], []
    for result, r_gt, t_gt, src, gt_tgt, mask in entries:
        ok = False
        if result.success:
            idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
            if idx.size:
                resid = result.apply(np.asarray(src)[idx]) - np.asarray(gt_tgt)[idx]
                rmse = float(np.sqrt((resid ** 2).sum(axis=1).mean()))
                ok = rmse < tau_rr
        hits.append(ok)
        if ok:
            rres.append(rotation_error_deg(result.rotation, r_gt))
            rtes.append(translation_error(result.translation, t_gt))
    out = {"rr": float(np.mean(hits))}
    out["rre_mean_deg"] = float(np.mean(rres)) if rres else None
    out["rte_mean"] = float(np.mean(rtes)) if rtes else None
    return out


def cycle_filter(start: np.ndarray, roundtrip: np.ndarray, tau: float) -> np.ndarray:
    """Indices whose forward-then-backward map returns within tau (normalized)."""
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(roundtrip, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"cycle filter shape mismatch: {a.shape} vs {b.shape}")
    return np.nonzero(np.linalg.norm(b - a, axis=1) < tau)[0]


def confidence_keep(conf: np.ndarray, percentile: float) -> np.ndarray:
    c = np.asarray(conf, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise DataError("no confidences to threshold")
    return c >= np.percentile(c, percentile)


# -- reporting ---------------------------------------------------------

_COLUMNS = ("ir", "fmr", "rr", "rre_mean_deg", "rte_mean", "epe")


def report_json(per_task: dict) -> str:
    return json.dumps(per_task, indent=1, sort_keys=True) + "\n"


def report_table(per_task: dict) -> str:
    header = ["task"] + [c.upper() for c in _COLUMNS]
    rows = [header]
    for task in sorted(per_task):
        block = per_task[task]
        row = [task]
        for c in _COLUMNS:
            v = block.get(c)
            row.append("-" if v is None else f"{v:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in rows]
    return "\n".join(lines) + "\n"
