"""Rotary embedding and affine coordinate code invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocorr import tensor as T
from geocorr.encodings import AffineCoordCode, RopeConfig, rope_apply, rope_apply_partial
from geocorr.errors import ConfigError, GeometryError
from geocorr.optim import AdamW
from geocorr.tensor import Tensor, backward

from fd import numeric_grad, rel_err


def test_divisibility_is_a_config_error():
    with pytest.raises(ConfigError):
        RopeConfig(coord_dim=3, head_dim=16)
    with pytest.raises(ConfigError):
        RopeConfig(coord_dim=2, head_dim=6)
    RopeConfig(coord_dim=3, head_dim=12)  # fine


def test_zero_coords_leave_features_unchanged():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 8))
    cfg = RopeConfig(coord_dim=2, head_dim=8)
    out = rope_apply(Tensor(f), Tensor(np.zeros((5, 2))), cfg)
    assert np.allclose(out.data, f, atol=1e-12)


def test_rotation_is_an_isometry():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((7, 12))
    c = rng.uniform(-3, 3, (7, 3))
    cfg = RopeConfig(coord_dim=3, head_dim=12)
    out = rope_apply(Tensor(f), Tensor(c), cfg)
    assert np.allclose(np.linalg.norm(out.data, axis=1),
                       np.linalg.norm(f, axis=1), atol=1e-10)
    # each rotation pair preserves its own two-channel norm
    g = cfg.group_dim
    half = g // 2
    for axis in range(3):
        blk_in = f[:, axis * g:(axis + 1) * g]
        blk_out = out.data[:, axis * g:(axis + 1) * g]
        n_in = blk_in[:, :half] ** 2 + blk_in[:, half:] ** 2
        n_out = blk_out[:, :half] ** 2 + blk_out[:, half:] ** 2
        assert np.allclose(n_in, n_out, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logits_depend_only_on_coordinate_difference(seed):
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(coord_dim=2, head_dim=8, base=50.0, coord_scale=3.0)
    q = rng.standard_normal((4, 8))
    k = rng.standard_normal((6, 8))
    cq = rng.uniform(-2, 2, (4, 2))
    ck = rng.uniform(-2, 2, (6, 2))
    delta = rng.uniform(-5, 5, (1, 2))

    def logits(cq_, ck_):
        rq = rope_apply(Tensor(q), Tensor(cq_), cfg).data
        rk = rope_apply(Tensor(k), Tensor(ck_), cfg).data
        return rq @ rk.T

    assert np.allclose(logits(cq, ck), logits(cq + delta, ck + delta), atol=1e-8)


def test_partial_rope_rotates_leading_subspace_only():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((5, 16))   # 16 channels, 3 axes -> 12 rotated
    c = rng.uniform(-1, 1, (5, 3))
    out = rope_apply_partial(Tensor(f), Tensor(c), coord_dim=3, base=100.0, coord_scale=2.0)
    assert np.allclose(out.data[:, 12:], f[:, 12:], atol=1e-15)
    assert not np.allclose(out.data[:, :12], f[:, :12])
    # relative property still holds through the passthrough channels
    delta = np.array([[0.7, -0.3, 1.1]])
    a = rope_apply_partial(Tensor(f), Tensor(c), 3, 100.0, 2.0).data
    b = rope_apply_partial(Tensor(f), Tensor(c + delta), 3, 100.0, 2.0).data
    q = rng.standard_normal((5, 16))
    qa = rope_apply_partial(Tensor(q), Tensor(c), 3, 100.0, 2.0).data
    qb = rope_apply_partial(Tensor(q), Tensor(c + delta), 3, 100.0, 2.0).data
    assert np.allclose(qa @ a.T, qb @ b.T, atol=1e-8)


def test_rope_gradients_flow_through_coords_and_features():
    rng = np.random.default_rng(3)
    cfg = RopeConfig(coord_dim=2, head_dim=8, coord_scale=1.5)
    f0 = rng.standard_normal((3, 8))
    c0 = rng.uniform(-1, 1, (3, 2))
    w = rng.standard_normal((8, 1))

    f = Tensor(f0.copy(), requires_grad=True)
    c = Tensor(c0.copy(), requires_grad=True)
    backward(T.tsum(T.matmul(rope_apply(f, c, cfg), w)))

    num_f = numeric_grad(
        lambda x: float((rope_apply(Tensor(x), Tensor(c0), cfg).data @ w).sum()), f0.copy())
    num_c = numeric_grad(
        lambda x: float((rope_apply(Tensor(f0), Tensor(x), cfg).data @ w).sum()), c0.copy())
    assert rel_err(f.grad, num_f) < 1e-6
    assert rel_err(c.grad, num_c) < 1e-6


# -- affine coordinate code --------------------------------------------

def test_encode_matches_affine_formula_and_shift_structure():
    rng = np.random.default_rng(4)
    code = AffineCoordCode(2, 16, rng)
    c = rng.uniform(-5, 5, (10, 2))
    out = code.encode(Tensor(c)).data
    assert np.allclose(out, c @ code.weight.data.T + code.bias.data, atol=1e-12)
    # encoding of a shifted coordinate differs by W @ delta: affine, not linear
    delta = np.array([[1.0, -2.0]])
    shifted = code.encode(Tensor(c + delta)).data
    assert np.allclose(shifted - out, (delta @ code.weight.data.T), atol=1e-12)


def test_decode_inverts_encode():
    rng = np.random.default_rng(5)
    code = AffineCoordCode(3, 24, rng)
    c = rng.uniform(-10, 10, (50, 3))
    back = code.decode(code.encode(Tensor(c))).data
    assert np.abs(back - c).max() < 1e-8


def test_decode_of_zeros_is_minus_pinv_bias():
    rng = np.random.default_rng(6)
    code = AffineCoordCode(2, 12, rng)
    code.bias.data = rng.standard_normal(12)
    out = code.decode(Tensor(np.zeros((4, 12)))).data
    expect = -(code.pinv @ code.bias.data)
    assert np.allclose(out, np.broadcast_to(expect, (4, 2)), atol=1e-10)


def test_convex_combination_of_codes_decodes_to_convex_combination():
    # the mechanism behind reading coordinates out of attention: decode is
    # affine, and convex weights keep the bias term intact
    rng = np.random.default_rng(7)
    code = AffineCoordCode(2, 16, rng)
    coords = rng.uniform(-3, 3, (6, 2))
    weights = rng.dirichlet(np.ones(6), size=4)          # rows sum to 1
    codes = code.encode(Tensor(coords)).data
    mixed = code.decode(Tensor(weights @ codes)).data
    assert np.abs(mixed - weights @ coords).max() < 1e-8


def test_rank_deficiency_is_rejected():
    rng = np.random.default_rng(8)
    with pytest.raises(ConfigError):
        AffineCoordCode(3, 2, rng)      # code narrower than coords
    code = AffineCoordCode(2, 8, rng)
    code.weight.data[:, 1] = code.weight.data[:, 0]   # collapse to rank 1
    code.weight.version += 1
    with pytest.raises(GeometryError):
        _ = code.pinv


def test_pinv_refreshes_after_optimizer_step():
    rng = np.random.default_rng(9)
    code = AffineCoordCode(2, 8, rng)
    first = code.pinv.copy()
    opt = AdamW(code.parameters(), lr=0.05, weight_decay=0.0)
    c = Tensor(rng.uniform(-1, 1, (5, 2)))
    target = rng.standard_normal((5, 8))
    backward(T.tsum(T.powc(T.sub(code.encode(c), target), 2.0)))
    opt.step()
    second = code.pinv
    assert not np.allclose(first, second)
    code.check_invariants()   # pinv @ W == I after refresh


def test_decode_gradient_through_weight_matches_fd():
    rng = np.random.default_rng(10)
    code = AffineCoordCode(2, 6, rng)
    codes_in = rng.standard_normal((3, 6))
    mix = rng.standard_normal((3, 2))
    w0 = code.weight.data.copy()

    backward(T.tsum(T.mul(code.decode(Tensor(codes_in)), mix)))
    analytic = code.weight.grad

    def f(w):
        pinv = np.linalg.pinv(w)
        dec = (codes_in - code.bias.data) @ pinv.T
        return float((dec * mix).sum())

    num = numeric_grad(f, w0.copy())
    assert rel_err(analytic, num) < 1e-5


def test_roundtrip_many_random_weights():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(3, 40))
        m = int(rng.integers(2, 4))
        code = AffineCoordCode(m, d, rng)
        code.bias.data = rng.standard_normal(d)
        c = rng.uniform(-20, 20, (8, m))
        back = code.decode(code.encode(Tensor(c))).data
        worst = max(worst, float(np.abs(back - c).max()))
    assert worst < 1e-8
