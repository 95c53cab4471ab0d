"""Training harness: flat run config, round-robin task mixing, JSONL logs,
last/best checkpoints, deterministic resume."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .errors import ConfigError, DataError, NumericsError
from .losses import LossConfig, TaskLoss, loss_total
from .model import CorrespondenceModel, ModelConfig, compute_task_loss
from .optim import AdamW, CosineSchedule, clip_grad_norm
from .synthdata import TASKS, TrainSample
from .dataio import load_dataset
from . import tensor as T


@dataclass(frozen=True)
class RunConfig:
    """One flat namespace for everything a run needs; unknown keys rejected."""

    seed: int = 0
    epochs: int = 1
    batch_size: int = 4
    # model
    d_enc: int = 128
    d_model: int = 256
    fusion_depth: int = 4
    fusion_heads: int = 8
    decoder_layers: int = 3
    decoder_heads: int = 1
    attention: str = "gaussian"
    qk_gain: float = 2.0
    patch: int = 8
    upsample: int = 4
    point_stride: float = 0.08
    knn: int = 4
    tokenizer_heads: int = 4
    # loss
    alpha: float = 0.2
    beta: float = 1.0
    gamma: float = 0.9
    tau: float = 0.07
    # optimizer
    lr: float = 1e-4
    min_lr: float = 1e-7
    warmup_steps: int = 20
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # data paths, one per task; empty string = task absent
    data_2d2d: str = ""
    data_2d3d: str = ""
    data_3d3d: str = ""
    # round-robin repeat counts
    mix_2d2d: int = 1
    mix_2d3d: int = 1
    mix_3d3d: int = 1
    # ablation switch: scales the per-layer auxiliary term (0 disables it)
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        for t in TASKS:
            if getattr(self, f"mix_{t}") < 1:
                raise ConfigError(f"mix_{t} must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_enc=self.d_enc, d_model=self.d_model,
                           fusion_depth=self.fusion_depth,
                           fusion_heads=self.fusion_heads,
                           decoder_layers=self.decoder_layers,
                           decoder_heads=self.decoder_heads,
                           attention=self.attention, patch=self.patch,
                           upsample=self.upsample,
                           point_stride=self.point_stride, knn=self.knn,
                           tokenizer_heads=self.tokenizer_heads,
                           qk_gain=self.qk_gain)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta,
                          gamma=self.gamma, tau=self.tau)


def config_from_dict(raw: dict, cls=RunConfig):
    """Build a config dataclass from JSON data with strict key/type checks."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    coerced = {}
    for key, value in raw.items():
        want = fields[key].type
        if want in ("int", int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {key!r} must be an integer")
            coerced[key] = value
        elif want in ("float", float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
            coerced[key] = float(value)
        elif want in ("str", str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {key!r} must be a string")
            coerced[key] = value
        else:
            coerced[key] = value
    return cls(**coerced)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def parse_override(text: str) -> tuple[str, object]:
    """key=value strings from the command line; JSON-decoded values."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, _, val = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        return key, json.loads(val)
    except json.JSONDecodeError:
        return key, val            # bare strings pass through


# -- data --------------------------------------------------------------


def load_training_data(cfg: RunConfig) -> dict[str, list[TrainSample]]:
    """Pool every configured dataset file and group samples by task tag."""
    by_task: dict[str, list[TrainSample]] = {}
    for task in TASKS:
        path = getattr(cfg, f"data_{task}")
        if not path:
            continue
        for sample in load_dataset(path):
            by_task.setdefault(sample.task, []).append(sample)
    if not by_task:
        raise DataError("no training data configured (all data_* paths empty)")
    return by_task


def batch_schedule(counts: dict[str, int], batch_size: int,
                   mix: dict[str, int], rng: np.random.Generator):
    """Round-robin interleave of per-task batches.

    Every dataset is consumed exactly once per epoch; mix weights control
    how many batches of a task are taken per cycle, approximating
    oversampling without duplicating data.
    """
    queues = {}
    for task in TASKS:
        if task not in counts:
            continue
        perm = rng.permutation(counts[task])
        queues[task] = [perm[i:i + batch_size]
                        for i in range(0, len(perm), batch_size)]
    order = [t for t in TASKS if t in queues]
    schedule = []
    while any(queues[t] for t in order):
        for task in order:
            for _ in range(mix[task]):
                if queues[task]:
                    schedule.append((task, queues[task].pop(0)))
    return schedule


def steps_per_epoch(counts: dict[str, int], batch_size: int) -> int:
    return sum(math.ceil(n / batch_size) for n in counts.values())


# -- checkpoints -------------------------------------------------------


def save_checkpoint(path, model: CorrespondenceModel, opt: AdamW,
                    step: int, epoch: int, best: float):
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    arrays.update(opt.state_arrays())
    arrays["meta.step"] = np.array(float(step))
    arrays["meta.epoch"] = np.array(float(epoch))
    arrays["meta.best"] = np.array(float(best))
    save_arrays(path, arrays)


def load_checkpoint(path, model: CorrespondenceModel,
                    opt: AdamW | None = None) -> tuple[int, int, float]:
    arrays = load_arrays(path)
    model.load_state({k[len("model."):]: v for k, v in arrays.items()
                      if k.startswith("model.")})
    if opt is not None:
        opt.load_state({k: v for k, v in arrays.items() if k.startswith("opt.")})
    step = int(arrays["meta.step"])
    epoch = int(arrays["meta.epoch"])
    best = float(arrays["meta.best"])
    return step, epoch, best


# -- the loop ----------------------------------------------------------


def mean_task_loss(parts: list[TaskLoss]) -> TaskLoss:
    inv = 1.0 / len(parts)

    def avg(vals):
        acc = vals[0]
        for v in vals[1:]:
            acc = T.add(acc, v)
        return T.mul(acc, inv)

    return TaskLoss(conf=avg([p.conf for p in parts]),
                    aux=avg([p.aux for p in parts]),
                    desc=avg([p.desc for p in parts]))


def train(cfg: RunConfig, run_dir, resume: str | None = None) -> dict:
    """Run the configured training; returns a summary dict.

    Every epoch rewrites last.uckp; the best epoch by mean training loss
    owns best.uckp. A non-finite loss aborts before the optimizer step, so
    the newest last.uckp stays usable.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")

    data = load_training_data(cfg)
    counts = {t: len(v) for t, v in data.items()}
    model = CorrespondenceModel(cfg.model_config(), np.random.default_rng(cfg.seed))
    named = model.named_parameters()          # fixes parameter names
    params = [p for _, p in named]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * steps_per_epoch(counts, cfg.batch_size)
    warmup = min(cfg.warmup_steps, total_steps)
    sched = CosineSchedule(cfg.lr, cfg.min_lr, warmup, total_steps)
    lcfg = cfg.loss_config()
    mix = {t: getattr(cfg, f"mix_{t}") for t in TASKS}

    step, start_epoch, best = 0, 0, float("inf")
    if resume:
        step, start_epoch, best = load_checkpoint(resume, model, opt)
    last_path = run_dir / "last.uckp"
    best_path = run_dir / "best.uckp"
    save_checkpoint(last_path, model, opt, step, start_epoch, best)

    log_path = run_dir / "train_log.jsonl"
    mode = "a" if resume else "w"
    with open(log_path, mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            order_rng = np.random.default_rng([cfg.seed, 7919, epoch])
            schedule = batch_schedule(counts, cfg.batch_size, mix, order_rng)
            epoch_losses = []
            for task, idxs in schedule:
                lr = sched.lr(step)
                parts = []
                for i in idxs:
                    sample = data[task][i]
                    parts.append(compute_task_loss(model(sample), sample, lcfg))
                batch_loss = mean_task_loss(parts)
                if cfg.aux_weight != 1.0:
                    batch_loss = TaskLoss(conf=batch_loss.conf,
                                          aux=T.mul(batch_loss.aux, cfg.aux_weight),
                                          desc=batch_loss.desc)
                total = loss_total({task: batch_loss}, cfg.beta)
                val = float(total.data)
                if not np.isfinite(val):
                    raise NumericsError(
                        f"non-finite loss at step {step} (task {task}); "
                        f"last checkpoint kept at {last_path}")
                opt.zero_grad()
                grads = total.backward()
                for p in params:
                    p.grad = grads.get(p)
                gnorm = clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr)
                row = {"step": step, "task": task, "loss_total": val,
                       "conf": float(batch_loss.conf.data),
                       "aux": float(batch_loss.aux.data),
                       "desc": float(batch_loss.desc.data),
                       "grad_norm": gnorm, "lr": lr}
                log.write(json.dumps(row) + "\n")
                epoch_losses.append(val)
                step += 1
            epoch_mean = float(np.mean(epoch_losses))
            save_checkpoint(last_path, model, opt, step, epoch + 1, best)
            if epoch_mean < best:
                best = epoch_mean
                save_checkpoint(best_path, model, opt, step, epoch + 1, best)
                save_checkpoint(last_path, model, opt, step, epoch + 1, best)
    return {"steps": step, "best": best,
            "last": str(last_path), "best_path": str(best_path),
            "log": str(log_path)}
