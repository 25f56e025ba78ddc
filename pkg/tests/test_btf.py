import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from vesselmorph.btf import (
    BtfParams,
    alpha_magnitudes,
    build_btf,
    empirical_cdf,
    render_btf,
)
from vesselmorph.phantoms import bar_phantom
from vesselmorph.scalespace import ScaleGrid


def test_cdf_constant():
    c = empirical_cdf(np.full((3, 4), 0.2))
    np.testing.assert_array_equal(c.le, 1.0)
    np.testing.assert_array_equal(c.gt, 0.0)


def test_cdf_2x2_hand_count():
    c = empirical_cdf(np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert c.le[0, 1] == 0.5 and c.gt[0, 1] == 0.5
    np.testing.assert_array_equal(c.le, [[0.25, 0.5], [0.75, 1.0]])
    assert c.prob_le(0.25) == 0.5


def test_cdf_unique_max():
    x = np.zeros((5, 5))
    x[2, 3] = 1.0
    assert empirical_cdf(x).le[2, 3] == 1.0


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(0, 1, allow_nan=False)))
def test_cdf_complement_exact(x):
    c = empirical_cdf(x)
    np.testing.assert_array_equal(c.le + c.gt, 1.0)
    assert c.le.max() == 1.0
    brute = np.array([[np.mean(x <= v) for v in row] for row in x])
    np.testing.assert_allclose(c.le, brute, rtol=0, atol=1e-15)


def test_alpha_unique_max_and_zero_lambda1():
    a1, _ = alpha_magnitudes(0.0, -2.0, 4.0, 1.0, 0.0)
    assert a1 == 1.0


def test_alpha_equal_eigenvalues():
    a1, a2 = alpha_magnitudes(1.5, 1.5, 2 * 1.5**2, 1.0, 1.0, BtfParams(0.5))
    assert a1 == pytest.approx(math.exp(-0.25), abs=1e-12)
    assert a2 == pytest.approx(0.778801, abs=1e-6)


def test_alpha_flat_pixel_uses_unit_factors():
    a1, a2 = alpha_magnitudes(0.0, 0.0, 0.0, 0.3, 0.7)
    assert (a1, a2) == (0.3, 0.7)


def test_alpha_ranges(nprng):
    l1, l2 = nprng.standard_normal((2, 1000)) * 5
    p = nprng.random(1000)
    a1, a2 = alpha_magnitudes(l1, l2, l1**2 + l2**2, p, 1 - p, BtfParams(2.0))
    assert np.all((a1 >= 0) & (a1 <= 1) & (a2 >= 0) & (a2 <= 1))


def test_epsilon_validated():
    with pytest.raises(ValueError):
        BtfParams(0.0)


def test_btf_geometry(nprng):
    x = bar_phantom(48, 6, noise=0.05, seed=1).image
    f = build_btf(x, ScaleGrid(1.0, 3.0, 0.5))
    assert f.shape == (4, 48, 48)
    assert np.all(np.abs(f) <= 1.0)
    a1 = np.hypot(f[0], f[1])
    a2 = np.hypot(f[2], f[3])
    assert a1.max() <= 1 and a2.max() <= 1
    both = (a1 > 0) & (a2 > 0)
    dot = f[0] * f[2] + f[1] * f[3]
    assert np.abs(dot[both]).max() < 1e-6


def test_btf_norms_equal_alphas():
    from vesselmorph.frangi import multiscale_vesselness
    from vesselmorph.scalespace import eig2x2

    x = bar_phantom(32, 5, noise=0.03, seed=2).image
    grid = ScaleGrid(1.0, 3.0, 1.0)
    f = build_btf(x, grid)
    h = multiscale_vesselness(x, grid).hessian
    e = eig2x2(h.hxx, h.hxy, h.hyy)
    c = empirical_cdf(x)
    a1, a2 = alpha_magnitudes(e.lam1, e.lam2, e.lam1**2 + e.lam2**2, c.le, c.gt)
    np.testing.assert_allclose(np.hypot(f[0], f[1]), a1, atol=1e-6)
    np.testing.assert_allclose(np.hypot(f[2], f[3]), a2, atol=1e-6)


def test_btf_constant_image():
    f = build_btf(np.full((16, 16), 0.5), ScaleGrid(1.0, 2.0, 0.5))
    np.testing.assert_array_equal(f[0], 1.0)
    np.testing.assert_array_equal(f[1:], 0.0)


def test_btf_constant_offset_invariance():
    x = bar_phantom(40, 6, noise=0.05, seed=4).image
    a = build_btf(x)
    b = build_btf(x + 0.25)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_bipolarity_on_bar():
    s = bar_phantom(64, 8, noise=0.05, seed=0, contrast=0.8, background=0.1)
    f = build_btf(s.image)
    a1 = np.hypot(f[0], f[1])
    a2 = np.hypot(f[2], f[3])
    assert a1[:, 32].mean() > a1[:, :12].mean()
    assert a2[:, [27, 28, 36, 37]].mean() > a2[:, 32].mean()


def test_render_zero_field_black():
    for mode in ("hue", "glyph"):
        np.testing.assert_array_equal(render_btf(np.zeros((4, 16, 16)), mode), 0.0)


def test_render_hue_constant_orientation():
    f = np.zeros((4, 20, 30))
    f[0] = 1.0
    rgb = render_btf(f, "hue")
    assert rgb.shape == (20, 30, 3)
    assert np.all(rgb == rgb[0, 0]) and rgb[0, 0].max() == 1.0


def test_render_glyph_lattice():
    f = np.zeros((4, 64, 64))
    f[0] = 1.0
    f[3] = 0.5
    rgb = render_btf(f, "glyph", spacing=8)
    _, n = ndimage.label(rgb.sum(axis=-1) > 0)
    assert n == 64
    assert rgb.shape == (64, 64, 3)


def test_render_rejects_wrong_channels():
    with pytest.raises(ValueError, match="4-channel"):
        render_btf(np.zeros((3, 8, 8)))
