import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, rel_err, seg_loss_loop, sim_loss_loop, ssim_loop
from vesselmorph.losses import (
    SegLossParams,
    SimLossParams,
    SsimParams,
    StructLossParams,
    dice_score,
    seg_loss,
    sim_loss,
    ssim,
    struct_loss,
)

unit = st.floats(0, 1, allow_nan=False)


def _pair(nprng, shape=(8, 8)):
    pred = nprng.uniform(0.05, 0.95, shape)
    y = (nprng.random(shape) < 0.3).astype(float)
    return pred, y


def test_seg_perfect_prediction():
    y = np.zeros((6, 6))
    y[2:4] = 1
    value, _ = seg_loss(y, y)
    clamp = 1e-7
    ce = -np.sum(y) * math.log(1 - clamp) / y.size
    assert value == pytest.approx(ce, abs=1e-6)
    assert value < 1e-6


def test_seg_empty_truth(nprng):
    pred = nprng.uniform(0.1, 0.9, (5, 5))
    value, _ = seg_loss(pred, np.zeros((5, 5)))
    assert value == pytest.approx(1.0, abs=1e-12)


def test_seg_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        seg_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_seg_matches_loop(nprng):
    for _ in range(20):
        pred, y = _pair(nprng)
        assert seg_loss(pred, y)[0] == pytest.approx(seg_loss_loop(pred, y), abs=1e-10)


def test_seg_gradient(nprng):
    for _ in range(5):
        pred, y = _pair(nprng)
        _, g = seg_loss(pred, y)
        assert rel_err(g, central_diff(lambda p: seg_loss(p, y)[0], pred)) < 1e-4


def test_seg_gradient_zero_under_clamp():
    pred = np.array([[0.0, 0.5], [1.0, 0.5]])
    _, g = seg_loss(pred, np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert g[0, 0] == 0.0 and g[1, 0] == 0.0


@given(arrays(np.float64, (4, 4), elements=unit), arrays(np.int8, (4, 4), elements=st.integers(0, 1)))
def test_seg_nonnegative(pred, y):
    assert seg_loss(pred, y)[0] >= -1e-12


def test_ssim_identity(nprng):
    a = nprng.random((8, 8))
    assert ssim(a, a)[0] == pytest.approx(1.0, abs=1e-12)


def test_ssim_constants():
    a, b = 0.3, 0.7
    want = (2 * a * b + 0.01) * 0.03 / ((a * a + b * b + 0.01) * 0.03)
    assert ssim(np.full((3, 3), a), np.full((3, 3), b))[0] == pytest.approx(want, rel=1e-12)
    assert ssim(np.full((3, 3), a), np.full((3, 3), a))[0] == pytest.approx(1.0, rel=1e-12)


def test_ssim_matches_loop_and_symmetric(nprng):
    for _ in range(20):
        a, b = nprng.random((2, 8, 8))
        v = ssim(a, b)[0]
        assert v == pytest.approx(ssim_loop(a, b), abs=1e-10)
        assert v == ssim(b, a)[0]


def test_ssim_gradients(nprng):
    for _ in range(5):
        a, b = nprng.random((2, 8, 8))
        _, ga, gb = ssim(a, b, SsimParams())
        assert rel_err(ga, central_diff(lambda x: ssim(x, b)[0], a)) < 1e-5
        assert rel_err(gb, central_diff(lambda x: ssim(a, x)[0], b)) < 1e-5


def test_ssim_needs_two_pixels():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 1)), np.zeros((1, 1)))


def test_sim_identity_zero(nprng):
    z = nprng.random((6, 6))
    assert sim_loss(z, z)[0] == pytest.approx(0.0, abs=1e-12)


def test_sim_constant_case():
    zs, zi = np.full((2, 2), 0.5), np.zeros((2, 2))
    s = 0.01 * 0.03 / ((0.25 + 0.01) * 0.03)
    assert sim_loss(zs, zi)[0] == pytest.approx(2.0 + 1.0 - s, abs=1e-12)


def test_sim_matches_loop_and_gradient(nprng):
    for _ in range(5):
        zs, zi = nprng.random((2, 8, 8))
        p = SimLossParams(0.3, 2.0)
        v, g = sim_loss(zs, zi, p)
        assert v == pytest.approx(sim_loss_loop(zs, zi, 0.3, 2.0), abs=1e-10)
        assert rel_err(g, central_diff(lambda x: sim_loss(x, zi, p)[0], zs)) < 1e-5


@settings(max_examples=50)
@given(arrays(np.float64, (3, 3), elements=unit), arrays(np.float64, (3, 3), elements=unit))
def test_sim_nonnegative_zero_iff_equal(a, b):
    v = sim_loss(a, b)[0]
    assert v >= -1e-12
    if not np.array_equal(a, b):
        assert v > 0


def test_struct_weight_ablations(nprng):
    pred, y = _pair(nprng)
    zs, zi = nprng.random((2, 8, 8))
    v, _, gz = struct_loss(pred, y, zs, zi, StructLossParams(1.0, 0.0))
    assert v == seg_loss(pred, y)[0]
    np.testing.assert_array_equal(gz, 0.0)
    assert struct_loss(pred, y, zi, zi, StructLossParams(0.0, 1.0))[0] == pytest.approx(0, abs=1e-12)


def test_struct_recomposition(nprng):
    for _ in range(10):
        pred, y = _pair(nprng)
        zs, zi = nprng.random((2, 8, 8))
        w1, w2 = nprng.uniform(0, 5, 2)
        v, gp, gz = struct_loss(pred, y, zs, zi, StructLossParams(w1, w2))
        want = w1 * seg_loss_loop(pred, y) + w2 * sim_loss_loop(zs, zi)
        assert v == pytest.approx(want, abs=1e-10)
        assert rel_err(gz, central_diff(lambda x: struct_loss(pred, y, x, zi, StructLossParams(w1, w2))[0], zs)) < 1e-5


def test_dice_examples():
    a = np.array([[1, 1, 0, 0]])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(a, np.array([[0, 1, 1, 0]])) == 0.5
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        dice_score(a, np.zeros((1, 3)))
    with pytest.raises(ValueError, match="binary"):
        dice_score(a * 0.5, a)


@given(arrays(np.int8, 12, elements=st.integers(0, 1)), arrays(np.int8, 12, elements=st.integers(0, 1)),
       st.permutations(list(range(12))))
def test_dice_symmetry_and_permutation(a, b, perm):
    d = dice_score(a, b)
    assert 0 <= d <= 1
    assert d == dice_score(b, a)
    assert d == dice_score(a[list(perm)], b[list(perm)])


def test_param_validation():
    with pytest.raises(ValueError):
        SegLossParams(delta=0)
    with pytest.raises(ValueError):
        SsimParams(c1=0)
    with pytest.raises(ValueError):
        StructLossParams(-1, 1)
