import numpy as np
import pytest

import geocorr.tensor as T
from geocorr.errors import ConfigError
from geocorr.fusion import FusionConfig, FusionEncoder
from geocorr.tensor import Tensor
from geocorr.tokenizers import CoordFrame, TokenField

from fd import numeric_grad_entries, rel_err


def make_field(rng, n, dim, coord_dim=2):
    if coord_dim == 2:
        frame = CoordFrame.for_image(32, 24)
        coords = rng.uniform([0, 0], [32, 24], size=(n, 2))
    else:
        pts = rng.normal(size=(n, 3))
        frame = CoordFrame.for_cloud(pts)
        coords = pts
    feats = Tensor(rng.normal(size=(n, dim)), requires_grad=True)
    return TokenField(features=feats, coords=coords, frame=frame)


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(dim=16, depth=0, heads=2)
    with pytest.raises(ConfigError):
        FusionConfig(dim=15, depth=1, heads=2)


def test_dim_mismatch_rejected():
    rng = np.random.default_rng(0)
    enc = FusionEncoder(FusionConfig(dim=16, depth=1, heads=2), rng)
    a = make_field(rng, 5, 16)
    b = make_field(rng, 4, 8)
    with pytest.raises(ConfigError):
        enc(a, b)


def test_swap_symmetry_exact():
    # shared weights + both directions computed from frozen inputs:
    # swapping the argument order must swap the outputs bit for bit
    rng = np.random.default_rng(1)
    enc = FusionEncoder(FusionConfig(dim=16, depth=2, heads=2), rng)
    for p in enc.parameters():
        if p.data.std() == 0 and p.data.ndim == 2:
            p.data += 0.05 * np.random.default_rng(9).normal(size=p.data.shape)
    a = make_field(rng, 6, 16)
    b = make_field(rng, 9, 16)
    oa1, ob1 = enc(a, b)
    ob2, oa2 = enc(b, a)
    assert np.array_equal(oa1.features.data, oa2.features.data)
    assert np.array_equal(ob1.features.data, ob2.features.data)


def test_cross_silent_at_init():
    # zero-initialized cross output projection: the other field cannot
    # influence a field's output until training opens the valve
    rng = np.random.default_rng(2)
    enc = FusionEncoder(FusionConfig(dim=16, depth=2, heads=2), rng)
    a = make_field(rng, 7, 16)
    b1 = make_field(rng, 5, 16)
    b2 = make_field(rng, 5, 16)
    out1, _ = enc(a, b1)
    out2, _ = enc(a, b2)
    assert np.array_equal(out1.features.data, out2.features.data)


def test_cross_couples_after_perturbation():
    rng = np.random.default_rng(3)
    enc = FusionEncoder(FusionConfig(dim=16, depth=1, heads=2), rng)
    for blk in enc.blocks:
        blk.cross_attn.w_o.weight.data += 0.1 * rng.normal(size=(16, 16))
    a = make_field(rng, 7, 16)
    b1 = make_field(rng, 5, 16)
    b2 = make_field(rng, 5, 16)
    out1, _ = enc(a, b1)
    out2, _ = enc(a, b2)
    assert not np.allclose(out1.features.data, out2.features.data)


def test_final_norm_rows_standardized():
    rng = np.random.default_rng(4)
    enc = FusionEncoder(FusionConfig(dim=32, depth=1, heads=4), rng)
    a = make_field(rng, 6, 32)
    b = make_field(rng, 8, 32, coord_dim=3)
    oa, ob = enc(a, b)
    for out in (oa, ob):
        x = out.features.data
        assert np.allclose(x.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(x.var(axis=1), 1.0, atol=1e-6)


def test_coords_and_frame_pass_through():
    rng = np.random.default_rng(5)
    enc = FusionEncoder(FusionConfig(dim=16, depth=1, heads=2), rng)
    a = make_field(rng, 6, 16)
    b = make_field(rng, 9, 16, coord_dim=3)
    oa, ob = enc(a, b)
    assert np.array_equal(oa.coords, a.coords)
    assert np.array_equal(ob.coords, b.coords)
    assert oa.frame is a.frame and ob.frame is b.frame


def test_gradients_reach_both_inputs_and_match_fd():
    rng = np.random.default_rng(6)
    enc = FusionEncoder(FusionConfig(dim=8, depth=1, heads=1), rng)
    for blk in enc.blocks:
        blk.cross_attn.w_o.weight.data += 0.2 * rng.normal(size=(8, 8))
    a = make_field(rng, 4, 8)
    b = make_field(rng, 3, 8, coord_dim=3)

    def run():
        oa, ob = enc(a, b)
        sq_a = oa.features * oa.features
        sq_b = ob.features * ob.features
        return T.add(T.tsum(T.mul(sq_a, 0.5)), T.tsum(sq_b))

    loss = run()
    grads = loss.backward()
    ga = grads[a.features]
    gb = grads[b.features]
    assert np.abs(ga).max() > 0 and np.abs(gb).max() > 0

    for leaf, got in ((a.features, ga), (b.features, gb)):
        idx = rng.choice(leaf.data.size, size=6, replace=False)
        num = numeric_grad_entries(lambda _x: run().data, leaf.data, idx)
        assert rel_err(got.ravel()[idx], num) < 1e-3

    # a weight used by both fields accumulates grad from both paths
    w = enc.blocks[0].mlp.layers[0].weight
    idx = rng.choice(w.data.size, size=4, replace=False)
    num = numeric_grad_entries(lambda _x: run().data, w.data, idx)
    gw = grads[w]
    assert rel_err(gw.ravel()[idx], num) < 1e-3
