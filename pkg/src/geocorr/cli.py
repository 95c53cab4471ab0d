"""Command-line surface: dataset generation, training, evaluation, and
attention heatmap export.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
Every failure prints one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import load_dataset, save_dataset, write_manifest
from .errors import ConfigError, GeocorrError
from .evalrun import (EvalOptions, evaluate_dataset, model_predictor,
                      oracle_predictor)
from .metrics import report_json, report_table
from .model import CorrespondenceModel
from .synthdata import TASKS, SceneSpec, generate
from .training import (RunConfig, config_from_dict, config_to_dict,
                       load_checkpoint, parse_override, train)


@dataclass(frozen=True)
class GenConfig:
    """Flat dataset-generation settings; one UCDS file per task."""

    out: str = "data"
    tasks: str = "2d2d,2d3d,3d3d"
    count: int = 8
    seed: int = 0
    size: int = 64
    n_keypoints: int = 128
    noise: float = 0.0
    overlap: float = 0.5
    max_rotation_deg: float = 45.0
    max_translation: float = 8.0
    max_perspective: float = 0.1
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    n_waves: int = 8
    n_blobs: int = 6
    n_surface: int = 1600
    height_amp: float = 0.35
    cloud_translation: float = 0.5
    depth_base: float = 1.5
    depth_amp: float = 0.4
    cloud_stride: int = 2

    def task_list(self) -> list[str]:
        tasks = [t.strip() for t in self.tasks.split(",") if t.strip()]
        bad = sorted(set(tasks) - set(TASKS))
        if bad or not tasks:
            raise ConfigError(f"invalid task tags {bad or ['<empty>']}; "
                              f"valid: {list(TASKS)}")
        return tasks

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(seed=seed, size=self.size,
                         n_keypoints=self.n_keypoints, noise=self.noise,
                         overlap=self.overlap,
                         max_rotation_deg=self.max_rotation_deg,
                         max_translation=self.max_translation,
                         max_perspective=self.max_perspective,
                         scale_range=(self.scale_lo, self.scale_hi),
                         n_waves=self.n_waves, n_blobs=self.n_blobs,
                         n_surface=self.n_surface,
                         height_amp=self.height_amp,
                         cloud_translation=self.cloud_translation,
                         depth_base=self.depth_base, depth_amp=self.depth_amp,
                         cloud_stride=self.cloud_stride)


def load_config(path: str | None, overrides: list[str], cls):
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    for text in overrides or []:
        key, value = parse_override(text)
        raw[key] = value
    return config_from_dict(raw, cls)


def default_run_dir(seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-seed{seed}"


# -- commands ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set, GenConfig)
    tasks = cfg.task_list()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gen_config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    seeds = list(range(cfg.seed, cfg.seed + cfg.count))
    for task in tasks:
        samples = [generate(task, cfg.scene_spec(s)) for s in seeds]
        save_dataset(out / f"{task}.ucds", samples)
        print(f"wrote {out / f'{task}.ucds'} ({len(samples)} samples)")
    write_manifest(out / "manifest.json", cfg.scene_spec(cfg.seed), tasks, seeds)
    print(f"wrote {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, RunConfig)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(cfg.seed)
    summary = train(cfg, run_dir, resume=args.resume)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _load_model(config_path, overrides, checkpoint) -> tuple[CorrespondenceModel, RunConfig]:
    cfg = load_config(config_path, overrides, RunConfig)
    model = CorrespondenceModel(cfg.model_config(), np.random.default_rng(cfg.seed))
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    load_checkpoint(ckpt, model)
    return model, cfg


def cmd_eval(args) -> int:
    opts = EvalOptions(conf_percentile=args.conf_percentile,
                       cycle=args.cycle, ransac_iters=args.ransac_iters,
                       seed=args.seed)
    if args.oracle:
        predict = oracle_predictor
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model, _ = _load_model(args.config, args.set, args.checkpoint)
        predict = model_predictor(model)
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {args.data}")
    samples = load_dataset(data_path)
    present = {s.task for s in samples}
    wanted = ([t.strip() for t in args.tasks.split(",") if t.strip()]
              if args.tasks else sorted(present))
    bad = sorted(set(wanted) - set(TASKS))
    if bad:
        raise ConfigError(f"invalid task tags {bad}; valid: {list(TASKS)}")
    for task in wanted:
        if task not in present:
            print(f"notice: task {task} absent from dataset, skipped")
    chosen = [s for s in samples if s.task in wanted]
    per_task = evaluate_dataset(predict, chosen, opts)
    blob = report_json(per_task)
    table = report_table(per_task)
    out_dir = Path(args.out) if args.out else data_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(blob)
    (out_dir / "metrics.txt").write_text(table)
    (out_dir / "eval_config.json").write_text(
        json.dumps(dataclasses.asdict(opts), indent=1, sort_keys=True) + "\n")
    print(table, end="")
    print(f"wrote {out_dir / 'metrics.json'}")
    return 0


def cmd_heatmap(args) -> int:
    model, _ = _load_model(args.config, args.set, args.checkpoint)
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {args.data}")
    samples = load_dataset(data_path)
    if not (0 <= args.sample < len(samples)):
        raise ConfigError(f"sample index {args.sample} out of range "
                          f"[0, {len(samples)})")
    sample = samples[args.sample]
    if sample.task != "2d2d":
        raise ConfigError(
            f"heatmaps need a grid-renderable 2d2d sample, got {sample.task}")
    out = model(sample)
    grid = out.tgt_field.grid
    n = len(sample.kps_src)
    try:
        queries = [int(q) for q in args.queries.split(",") if q.strip()]
    except ValueError:
        raise ConfigError(f"bad query list {args.queries!r}")
    if not queries:
        raise ConfigError("no query ids given")
    for q in queries:
        if not (0 <= q < n):
            raise ConfigError(f"query id {q} out of range [0, {n})")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, cols = grid.shape
    index = []
    for layer, attn in enumerate(out.result.attn):
        for q in queries:
            mass = attn[q].reshape(rows, cols)
            img = np.clip(np.round(255.0 * mass), 0, 255).astype(np.uint8)
            name = f"layer{layer}_query{q}.pgm"
            with open(out_dir / name, "wb") as f:
                f.write(f"P5\n{cols} {rows}\n255\n".encode())
                f.write(img.tobytes())
            tok = int(np.argmax(attn[q]))
            index.append({"layer": layer, "query": q, "file": name,
                          "argmax_token": tok,
                          "argmax_coord": [float(c) for c in
                                           out.tgt_field.coords[tok]],
                          "intensity_sum": int(img.sum())})
    (out_dir / "index.json").write_text(
        json.dumps(index, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(index)} heatmaps to {out_dir}")
    return 0


# -- wiring ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geocorr",
        description="Synthetic-geometry correspondence toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("gen-data", help="generate synthetic datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--run-dir", help="artifact directory (default timestamped)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (.uckp)")
    p.add_argument("--data", required=True, help="dataset file (.ucds)")
    p.add_argument("--tasks", help="comma-separated task filter")
    p.add_argument("--out", help="output directory (default beside data)")
    p.add_argument("--oracle", action="store_true",
                   help="score ground-truth predictions instead of a model")
    p.add_argument("--cycle", action="store_true",
                   help="apply the cycle-consistency filter")
    p.add_argument("--conf-percentile", type=float, default=0.0,
                   help="drop predictions below this confidence percentile")
    p.add_argument("--ransac-iters", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export decoder attention heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file (.ucds)")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--queries", required=True,
                   help="comma-separated query keypoint ids")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {str(exc).replace(chr(10), ' ')}", file=sys.stderr)
        return 2
    except GeocorrError as exc:
        kind = type(exc).__name__
        print(f"error: {kind}: {str(exc).replace(chr(10), ' ')}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
