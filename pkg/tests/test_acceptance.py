"""Acceptance suite: one test per release criterion.

Each test states its criterion in the docstring and asserts the stated
tolerance directly; `pytest -v` then reads as a pass/fail checklist.
The learning criteria (07-11) train real models and dominate runtime;
everything they need is built by session-scoped fixtures so a model is
trained exactly once and shared by every criterion that consumes it.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from fd import numeric_grad_entries, rel_err
from geocorr import tensor as T
from geocorr.attention import attention_matrix
from geocorr.decoder import DecoderConfig, MatchingDecoder, position_readout
from geocorr.encodings import AffineCoordCode
from geocorr.evalrun import EvalOptions, evaluate_task, model_predictor
from geocorr.geometry import random_rotation
from geocorr.losses import LossConfig, loss_total
from geocorr.metrics import (kabsch, ransac_register, rotation_error_deg,
                             translation_error)
from geocorr.model import CorrespondenceModel, compute_task_loss
from geocorr.synthdata import SceneSpec, generate
from geocorr.tensor import Tensor
from geocorr.tokenizers import CoordFrame, TokenField
from geocorr.training import config_from_dict, load_checkpoint, train
from geocorr.dataio import save_dataset


# -- 01: gradient fidelity ---------------------------------------------

def test_criterion_01_gradient_fidelity_full_model():
    """Full objective gradient on a micro model matches finite differences
    within 1e-4 relative for every parameter tensor, in under 60 s."""
    t0 = time.monotonic()
    cfg_d = {"d_enc": 16, "d_model": 16, "fusion_depth": 1, "fusion_heads": 2,
             "decoder_layers": 2, "decoder_heads": 1, "patch": 8, "upsample": 1,
             "point_stride": 0.2, "tokenizer_heads": 2, "data_2d2d": "x"}
    cfg = config_from_dict(cfg_d)
    model = CorrespondenceModel(cfg.model_config(), np.random.default_rng(0))
    # 24x24 image pair -> 3x3 = 9 tokens; 4 query keypoints
    sample = generate("2d2d", SceneSpec(seed=3, size=24, n_keypoints=4,
                                        overlap=0.9))
    lcfg = LossConfig()

    def objective() -> Tensor:
        part = compute_task_loss(model(sample), sample, lcfg)
        return loss_total({"2d2d": part}, lcfg.beta)

    total = objective()
    grads = total.backward()
    rng = np.random.default_rng(7)
    checked = 0
    for name, p in model.named_parameters():
        ana = grads.get(p)
        ana = np.zeros_like(p.data) if ana is None else np.asarray(ana)
        n = p.data.size
        picks = rng.choice(n, size=min(3, n), replace=False)
        num = numeric_grad_entries(lambda _x: objective().data, p.data,
                                   picks, h=1e-4)
        err = rel_err(ana.reshape(-1)[picks], num, floor=1e-3)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"
        checked += 1
    assert checked > 50          # the sweep really did cover the model
    assert time.monotonic() - t0 < 60.0


# -- 02: bijective decode ----------------------------------------------

def test_criterion_02_decode_encode_roundtrip():
    """decode(encode(x)) = x within 1e-8 over 1000 random batches with
    random full-rank code matrices."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(1000):
        m = 2 if i % 2 == 0 else 3
        d = int(rng.integers(m, 25))
        pe = AffineCoordCode(m, d, rng)
        pe.weight.data = pe.weight.data + 0.3 * rng.standard_normal((d, m))
        pe._validate(pe.weight.data)          # full rank after perturbation
        pe.bias.data = rng.standard_normal(d)
        x = rng.uniform(-5.0, 5.0, size=(8, m))
        back = pe.decode(pe.encode(x)).data
        worst = max(worst, float(np.abs(back - x).max()))
    assert worst < 1e-8, f"worst roundtrip error {worst:.2e}"


# -- 03: one-hot exactness ---------------------------------------------

def test_criterion_03_one_hot_attention_decodes_matched_token():
    """Planted one-hot attention rows decode to exactly the matched
    token's coordinates (1e-8)."""
    rng = np.random.default_rng(13)
    for m in (2, 3):
        pe = AffineCoordCode(m, 16, rng)
        pe.bias.data = rng.standard_normal(16)
        coords = rng.uniform(-3.0, 3.0, size=(9, m))
        codes = pe.encode(coords)
        match = rng.permutation(9)[:4]
        attn = np.zeros((4, 9))
        attn[np.arange(4), match] = 1.0
        decoded = position_readout(attn, codes, pe).data
        assert np.abs(decoded - coords[match]).max() < 1e-8


# -- 04: translation equivariance --------------------------------------

def test_criterion_04_translation_equivariance_100_shifts():
    """Shifting all target coordinates by a random offset shifts every
    per-layer estimate by exactly that offset (1e-6), both attention
    kinds, 100 offsets each."""
    rng = np.random.default_rng(17)
    frame = CoordFrame(offset=(0.0, 0.0), scale=(1.0, 1.0), kind="image")
    coords = rng.uniform(-2.0, 2.0, size=(12, 2))
    feats = rng.normal(size=(12, 16))
    f_k = Tensor(rng.normal(size=(5, 16)))
    for kind in ("gaussian", "vanilla"):
        dec = MatchingDecoder(DecoderConfig(layers=3, dim=16, heads=2,
                                            kind=kind), rng)
        for layer in dec.layers:   # non-degenerate value/FFN paths
            layer.w_v.weight.data = 0.1 * rng.standard_normal((16, 16))
        pe = AffineCoordCode(2, 16, rng)
        base = dec(f_k, TokenField(features=Tensor(feats), coords=coords,
                                   frame=frame), pe)
        for _ in range(100):
            delta = rng.uniform(-10.0, 10.0, size=2)
            shifted = dec(f_k, TokenField(features=Tensor(feats),
                                          coords=coords + delta,
                                          frame=frame), pe)
            for e0, e1 in zip(base.history, shifted.history):
                assert np.abs(e1.data - (e0.data + delta)).max() < 1e-6


# -- 05: attention invariants ------------------------------------------

def test_criterion_05_attention_rows_and_nearest_neighbor():
    """Attention rows sum to 1 within 1e-9; Gaussian argmax equals
    brute-force nearest neighbor on 200 random instances."""
    rng = np.random.default_rng(19)
    for kind in ("gaussian", "vanilla"):
        for n, m, d in ((4, 9, 16), (1, 32, 8), (17, 5, 4)):
            a = attention_matrix(kind, Tensor(rng.normal(size=(n, d))),
                                 Tensor(rng.normal(size=(m, d)))).data
            assert np.abs(a.sum(axis=1) - 1.0).max() < 1e-9
    for i in range(200):
        q = rng.normal(size=(4, 16))
        k = rng.normal(size=(32, 16))
        a = attention_matrix("gaussian", Tensor(q), Tensor(k)).data
        assert np.array_equal(a.argmax(axis=1),
                              cdist(q, k).argmin(axis=1))


# -- 06: rigid registration oracle -------------------------------------

def test_criterion_06_kabsch_exact_and_ransac_outliers():
    """Noise-free closed-form recovery: RRE < 1e-6 deg, RTE < 1e-9.
    With 30% outliers and 512 iterations: RRE < 0.5 deg in >= 48/50
    seeded trials."""
    rng = np.random.default_rng(23)
    for _ in range(1000):
        src = rng.normal(size=(40, 3))
        r = random_rotation(rng, max_angle_deg=180.0)
        t = rng.uniform(-2.0, 2.0, size=3)
        res = kabsch(src, src @ r.T + t)
        assert rotation_error_deg(res.rotation, r) < 1e-6
        assert translation_error(res.translation, t) < 1e-9

    hits = 0
    for trial in range(50):
        trng = np.random.default_rng(1000 + trial)
        src = trng.normal(size=(120, 3))
        r = random_rotation(trng, max_angle_deg=180.0)
        t = trng.uniform(-2.0, 2.0, size=3)
        tgt = src @ r.T + t
        bad = trng.choice(120, size=36, replace=False)     # 30% outliers
        tgt[bad] = trng.uniform(-6.0, 6.0, size=(36, 3))
        res = ransac_register(src, tgt, tau=0.1, iters=512, seed=trial)
        if res.success and rotation_error_deg(res.rotation, r) < 0.5:
            hits += 1
    assert hits >= 48, f"only {hits}/50 trials recovered the rotation"


# -- learning fixtures ---------------------------------------------------
# Hyperparameters come from offline calibration at the stated capacity and
# keep each training run inside its 30-minute wall budget. A model is
# trained once per task and shared by every criterion that consumes it.

FULL_CAP = {"d_enc": 128, "d_model": 256, "fusion_depth": 4,
            "fusion_heads": 8, "decoder_layers": 3, "patch": 8,
            "upsample": 4}
TRAIN_2D = {"n": 128, "epochs": 30, "lr": 1e-3, "beta": 0.05, "batch": 2}
TRAIN_3D = {"n": 96, "epochs": 24, "lr": 1e-3, "beta": 0.05, "batch": 2}
HELD_SEED = 9000
N_HELD = 50


def _fit(root, task: str, train_samples, plan, extra=None):
    data = root / f"{task}.ucds"
    save_dataset(data, train_samples)
    cfg = config_from_dict({**FULL_CAP, "data_" + task: str(data),
                            "lr": plan["lr"], "beta": plan["beta"],
                            "batch_size": plan["batch"],
                            "epochs": plan["epochs"], "warmup_steps": 20,
                            "seed": 0, **(extra or {})})
    t0 = time.monotonic()
    summary = train(cfg, root / "run")
    wall = time.monotonic() - t0
    model = CorrespondenceModel(cfg.model_config(), np.random.default_rng(0))
    load_checkpoint(summary["last"], model)
    return model, wall


@pytest.fixture(scope="session")
def trained_2d2d(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc2d")
    train_samples = [generate("2d2d", SceneSpec(seed=1000 + i))
                     for i in range(TRAIN_2D["n"])]
    held = [generate("2d2d", SceneSpec(seed=HELD_SEED + i))
            for i in range(N_HELD)]
    model, wall = _fit(root, "2d2d", train_samples, TRAIN_2D)
    return model, held, wall


@pytest.fixture(scope="session")
def trained_3d3d(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc3d")
    train_samples = [generate("3d3d", SceneSpec(seed=1000 + i, overlap=0.6))
                     for i in range(TRAIN_3D["n"])]
    held = [generate("3d3d", SceneSpec(seed=HELD_SEED + i, overlap=0.6))
            for i in range(N_HELD)]
    model, wall = _fit(root, "3d3d", train_samples, TRAIN_3D)
    return model, held, wall


# -- 07: 2d2d learning ---------------------------------------------------

def test_criterion_07_learning_2d2d(trained_2d2d):
    """A 30-minute CPU training run on synthetic homography pairs reaches
    held-out mean EPE < 2 px at 64x64 and inlier rate @3px > 0.8 over 50
    pairs. The metric plumbing is validated against the generator's
    ground-truth passthrough first."""
    from geocorr.evalrun import oracle_predictor
    model, held, wall = trained_2d2d
    sanity = evaluate_task(oracle_predictor, held, EvalOptions())
    assert sanity["epe"] < 1e-9 and sanity["ir"] == 1.0
    assert wall < 1800.0, f"training took {wall:.0f}s, budget is 1800s"
    block = evaluate_task(model_predictor(model), held, EvalOptions())
    assert block["epe"] < 2.0, f"held-out EPE {block['epe']:.3f} px"
    assert block["ir"] > 0.8, f"held-out IR@3px {block['ir']:.3f}"


# -- 08: 3d3d learning ---------------------------------------------------

def test_criterion_08_learning_3d3d(trained_3d3d):
    """Same-capacity model on synthetic rigid pairs (overlap >= 0.5)
    reaches IR@0.05*diam > 0.8 and registration recall > 0.9 over 50 pairs
    after RANSAC."""
    model, held, wall = trained_3d3d
    assert wall < 1800.0, f"training took {wall:.0f}s, budget is 1800s"
    block = evaluate_task(model_predictor(model), held,
                          EvalOptions(ransac_iters=256))
    assert block["ir"] > 0.8, f"held-out IR@0.05diam {block['ir']:.3f}"
    assert block["rr"] > 0.9, f"registration recall {block['rr']:.3f}"


# -- 09: auxiliary loss ablation -----------------------------------------

ABLATE = {"d_enc": 32, "d_model": 64, "fusion_depth": 2, "fusion_heads": 4,
          "tokenizer_heads": 2, "patch": 8, "upsample": 4, "batch_size": 4,
          "lr": 1e-3, "beta": 0.05, "warmup_steps": 10, "epochs": 10}
N_ABLATE = 32


def _ablation_epe(root, train_path, held, seed: int, **overrides) -> float:
    cfg = config_from_dict({**ABLATE, "data_2d2d": str(train_path),
                            "seed": seed, **overrides})
    tag = f"s{seed}_" + "_".join(f"{k}={v}" for k, v in overrides.items())
    summary = train(cfg, root / tag)
    model = CorrespondenceModel(cfg.model_config(), np.random.default_rng(seed))
    load_checkpoint(summary["last"], model)
    block = evaluate_task(model_predictor(model), held,
                          EvalOptions(ransac_iters=8))
    return block["epe"]


@pytest.fixture(scope="session")
def ablation_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("accab")
    train_path = root / "2d2d.ucds"
    save_dataset(train_path, [generate("2d2d", SceneSpec(seed=1000 + i))
                              for i in range(N_ABLATE)])
    held = [generate("2d2d", SceneSpec(seed=HELD_SEED + i))
            for i in range(30)]
    return root, train_path, held


def test_criterion_09_aux_loss_direction(ablation_data):
    """With a single decoder layer, enabling the per-layer auxiliary loss
    strictly improves held-out EPE vs the no-aux run in >= 4 of 5 seeds."""
    root, train_path, held = ablation_data
    wins = 0
    rows = []
    for seed in range(5):
        on = _ablation_epe(root, train_path, held, seed,
                           decoder_layers=1, aux_weight=1.0)
        off = _ablation_epe(root, train_path, held, seed,
                            decoder_layers=1, aux_weight=0.0)
        wins += on < off
        rows.append((seed, on, off))
    assert wins >= 4, f"aux won {wins}/5 seeds: {rows}"


# -- 10: attention kind ablation -----------------------------------------

def test_criterion_10_gaussian_vs_vanilla(ablation_data):
    """Gaussian decoder attention reaches held-out EPE <= vanilla under
    otherwise identical configs in >= 4 of 5 seeds."""
    root, train_path, held = ablation_data
    wins = 0
    rows = []
    for seed in range(5):
        g = _ablation_epe(root, train_path, held, seed,
                          decoder_layers=3, attention="gaussian")
        v = _ablation_epe(root, train_path, held, seed,
                          decoder_layers=3, attention="vanilla")
        wins += g <= v
        rows.append((seed, g, v))
    assert wins >= 4, f"gaussian won {wins}/5 seeds: {rows}"


# -- 11: cycle-consistency filter ----------------------------------------

def test_criterion_11_cycle_filter_planted_outliers(trained_3d3d):
    """With tau_cycle = 0.02, a constructed match set of 108 forward
    predictions plus 20 planted wrong matches is filtered so that all 20
    are removed and at least 100 of the good ones survive."""
    from geocorr.evalrun import reversed_sample
    from geocorr.metrics import cycle_filter
    model, _, _ = trained_3d3d
    predict = model_predictor(model)
    sample = generate("3d3d", SceneSpec(seed=HELD_SEED + 500, overlap=0.8,
                                        n_keypoints=220))
    visible = np.nonzero(np.asarray(sample.mask, dtype=bool))[0]
    assert len(visible) >= 128, "need 128 visible queries"
    good_idx, bad_idx = visible[:108], visible[108:128]

    pred, _ = predict(sample)
    tgt = np.asarray(sample.kps_tgt, dtype=np.float64)
    matches = pred.copy()
    # plant unambiguous wrong matches: give each bad query the true target
    # of the keypoint farthest from its own
    far = cdist(tgt[bad_idx], tgt).argmax(axis=1)
    matches[bad_idx] = tgt[far]

    back_sample = reversed_sample(sample, matches)
    back, _ = predict(back_sample)
    frame = CoordFrame.for_cloud(np.asarray(sample.source))
    kept = cycle_filter(frame.normalize(np.asarray(sample.kps_src)),
                        frame.normalize(back), tau=0.02)
    kept_set = set(int(i) for i in kept)
    bad_kept = [int(i) for i in bad_idx if int(i) in kept_set]
    good_kept = [int(i) for i in good_idx if int(i) in kept_set]
    assert not bad_kept, f"{len(bad_kept)} planted bad matches survived"
    assert len(good_kept) >= 100, f"only {len(good_kept)}/108 good kept"


# -- 12: determinism ----------------------------------------------------

def test_criterion_12_identical_runs_identical_metrics(tmp_path):
    """Two train+eval runs with the same seed and config produce byte
    identical metrics JSON."""
    from geocorr.cli import main as cli_main
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--set", "out=" + str(data),
                     "--set", "tasks=3d3d", "--set", "count=2",
                     "--set", "seed=50", "--set", "size=32",
                     "--set", "n_keypoints=16", "--set", "n_surface=300",
                     "--set", "cloud_stride=4", "--set", "overlap=0.8"]) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({
        "data_3d3d": str(data / "3d3d.ucds"), "d_enc": 16, "d_model": 16,
        "fusion_depth": 1, "fusion_heads": 2, "decoder_layers": 1,
        "tokenizer_heads": 2, "point_stride": 0.25, "epochs": 1,
        "batch_size": 2, "warmup_steps": 1, "seed": 4}))
    payloads = []
    for tag in ("a", "b"):
        run = tmp_path / tag
        assert cli_main(["train", "--config", str(cfg),
                         "--run-dir", str(run)]) == 0
        out = tmp_path / ("metrics_" + tag)
        assert cli_main(["eval", "--config", str(cfg),
                         "--checkpoint", str(run / "last.uckp"),
                         "--data", str(data / "3d3d.ucds"),
                         "--out", str(out), "--ransac-iters", "64",
                         "--seed", "9"]) == 0
        payloads.append((out / "metrics.json").read_bytes())
    assert payloads[0] == payloads[1]
