"""AdamW with decoupled weight decay, gradient clipping, cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, OptimizerError
from .nn import Parameter


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Non-finite gradients abort, naming the
    offending parameter.
    """
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam. Decay multiplies the raw parameter,
    not the gradient, and is skipped for parameters flagged in ``no_decay``.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay: set[str] | None = None):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay or set()
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        """One update. Parameters with no gradient this step are skipped."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
            p.version += 1

    # optimizer state round-trips through checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"opt.t": np.array([float(self.t)])}
        for i, p in enumerate(self.params):
            out[f"opt.m.{p.name}"] = self._m[i]
            out[f"opt.v.{p.name}"] = self._v[i]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["opt.t"][0])
        for i, p in enumerate(self.params):
            # asarray keeps rank-0 moment shapes intact
            self._m[i] = np.asarray(arrays[f"opt.m.{p.name}"], dtype=np.float64).copy()
            self._v[i] = np.asarray(arrays[f"opt.v.{p.name}"], dtype=np.float64).copy()


class CosineSchedule:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""

    def __init__(self, base_lr: float, min_lr: float, warmup_steps: int, total_steps: int):
        if total_steps <= 0 or warmup_steps < 0 or warmup_steps > total_steps:
            raise ConfigError(
                f"bad schedule: warmup={warmup_steps}, total={total_steps}"
            )
        if min_lr > base_lr:
            raise ConfigError(f"min_lr {min_lr} exceeds base_lr {base_lr}")
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / max(1, self.warmup_steps)
        # the last step of the run lands exactly on min_lr
        span = max(1, self.total_steps - 1 - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))
