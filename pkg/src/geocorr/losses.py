"""Training objectives.

Three ingredients per task: a confidence-weighted coordinate loss on the
final prediction, a discounted sum of per-layer coordinate errors, and a
contrastive descriptor loss. Coordinate losses run in normalized units so
tasks of different physical scale contribute comparably. Keypoints flagged
invisible are excluded from the coordinate losses; their descriptors still
serve as negatives in the contrastive term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2        # confidence regularizer strength
    beta: float = 1.0         # descriptor loss weight
    gamma: float = 0.9        # per-layer discount, last layer weight 1
    tau: float = 0.07         # contrastive temperature

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


def _valid_rows(mask) -> np.ndarray:
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if idx.size == 0:
        raise DataError("no visible keypoints in mask")
    return idx


def _masked(x: Tensor, idx: np.ndarray) -> Tensor:
    if idx.size == x.shape[0] and np.array_equal(idx, np.arange(x.shape[0])):
        return x
    return T.index_select(x, idx, axis=0)


def loss_conf(pred: Tensor, conf: Tensor, gt: np.ndarray, mask, alpha: float) -> Tensor:
    """mean_i  c_i * |pred_i - gt_i|_1  -  alpha * log c_i  over visible rows."""
    idx = _valid_rows(mask)
    p = _masked(pred, idx)
    c = _masked(conf, idx)
    if c.ndim == 2:
        c = T.reshape(c, (c.shape[0],))
    err = T.tsum(T.absval(T.sub(p, np.asarray(gt, dtype=np.float64)[idx])), axis=1)
    per_kp = T.sub(T.mul(c, err), T.mul(T.log(c), alpha))
    return T.tmean(per_kp)


def loss_aux(history, gt: np.ndarray, mask, gamma: float) -> Tensor:
    """Discounted per-layer mean L1; the final layer always gets weight 1."""
    if not history:
        raise DataError("empty coordinate history")
    idx = _valid_rows(mask)
    g = np.asarray(gt, dtype=np.float64)[idx]
    depth = len(history)
    total = None
    for l, est in enumerate(history):
        w = gamma ** (depth - 1 - l)
        layer = T.mul(T.tmean(T.tsum(T.absval(T.sub(_masked(est, idx), g)), axis=1)), w)
        total = layer if total is None else T.add(total, layer)
    return total


def pairwise_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    # eps keeps the sqrt differentiable when a positive pair coincides
    return T.sqrt(T.add(T.pairwise_sqdist(a, b), eps))


def loss_infonce(f_a: Tensor, f_b: Tensor, tau: float, mask=None) -> Tensor:
    """Symmetric contrastive loss; row i of each side is the positive pair.

    Logits are negative scaled distances, and the cross entropy is summed
    over visible positives in both matching directions. Invisible rows are
    skipped as positives but remain in every softmax as negatives.
    """
    n = f_a.shape[0]
    if f_b.shape[0] != n:
        raise DataError(f"contrastive sides disagree: {n} vs {f_b.shape[0]} rows")
    if n < 2:
        raise DataError("contrastive loss needs at least 2 pairs for negatives")
    idx = _valid_rows(mask) if mask is not None else np.arange(n)
    logits = T.mul(pairwise_distance(f_a, f_b), -1.0 / tau)      # (N, N)
    diag = np.arange(n)
    fwd = T.log_softmax(logits)                                   # rows: a -> b
    bwd = T.log_softmax(T.transpose(logits))                      # rows: b -> a
    picked = []
    for lp in (fwd, bwd):
        rows = T.index_select(T.reshape(lp, (n * n,)), idx * n + idx, axis=0)
        picked.append(T.tsum(rows))
    return T.mul(T.add(picked[0], picked[1]), -1.0)


def loss_desc(f_s_desc: Tensor, f_t_desc: Tensor, f_k_final: Tensor,
              tau: float, mask=None) -> Tensor:
    """Descriptor objective: source-vs-target plus refined-query-vs-target."""
    return T.add(
        loss_infonce(f_s_desc, f_t_desc, tau, mask),
        loss_infonce(f_k_final, f_t_desc, tau, mask),
    )


@dataclass
class TaskLoss:
    conf: Tensor
    aux: Tensor
    desc: Tensor | None = None

    def total(self, beta: float) -> Tensor:
        out = T.add(self.conf, self.aux)
        if self.desc is not None:
            out = T.add(out, T.mul(self.desc, beta))
        return out


def loss_total(tasks: dict, beta: float) -> Tensor:
    """Plain sum of per-task composites over whatever tasks are present."""
    if not tasks:
        raise DataError("no tasks in batch")
    out = None
    for t in tasks.values():
        part = t.total(beta) if isinstance(t, TaskLoss) else t
        out = part if out is None else T.add(out, part)
    return out
