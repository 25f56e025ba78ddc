"""Bipolar tensor field: eigenvectors at the optimal scale weighted by brightness ranks.

Channel layout of the 4-channel field is ``(a1*v1_row, a1*v1_col, a2*v2_row, a2*v2_col)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .core import as_image
from .frangi import FrangiParams, multiscale_vesselness
from .scalespace import ScaleGrid, eig2x2

# Hessians below this Frobenius norm are flat; convolution roundoff on a
# constant image sits near 1e-17, real structure on [0, 1] images far above.
FLAT_NORM = 1e-12


@dataclass(frozen=True)
class BtfParams:
    epsilon: float = 0.5

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class CdfTable:
    """Exact empirical CDF of an image.

    ``sorted_values`` holds every pixel value in ascending order; ``le`` and
    ``gt`` give ``P(x <= x_ij)`` and ``P(x > x_ij)`` for each pixel.
    """

    sorted_values: np.ndarray
    le: np.ndarray
    gt: np.ndarray

    def prob_le(self, t):
        n = self.sorted_values.size
        return np.searchsorted(self.sorted_values, t, side="right") / n

    def prob_gt(self, t):
        return 1.0 - self.prob_le(t)


def empirical_cdf(x) -> CdfTable:
    x = as_image(x)
    flat = np.sort(x, axis=None)
    le = np.searchsorted(flat, x, side="right") / flat.size
    return CdfTable(flat, le, 1.0 - le)


def alpha_magnitudes(lam1, lam2, frob_sq, p_le, p_gt, params: BtfParams = BtfParams()):
    """``(a1, a2)`` from eigenvalues, squared Frobenius norm and CDF terms.

    Flat pixels (``frob_sq`` at or below ``FLAT_NORM**2``) take both
    exponential factors as 1.
    """
    lam1 = np.asarray(lam1, dtype=np.float64)
    lam2 = np.asarray(lam2, dtype=np.float64)
    frob_sq = np.asarray(frob_sq, dtype=np.float64)
    flat = frob_sq <= FLAT_NORM**2
    denom = np.where(flat, 1.0, frob_sq)
    r1 = np.where(flat, 0.0, lam1**2 / denom)
    r2 = np.where(flat, 0.0, lam2**2 / denom)
    a1 = p_le * np.exp(-params.epsilon * r1)
    a2 = p_gt * np.exp(-params.epsilon * r2)
    return a1, a2


def build_btf(
    x,
    grid: ScaleGrid = ScaleGrid(),
    fp: FrangiParams = FrangiParams(),
    bp: BtfParams = BtfParams(),
) -> np.ndarray:
    x = as_image(x)
    res = multiscale_vesselness(x, grid, fp)
    h = res.hessian
    eig = eig2x2(h.hxx, h.hxy, h.hyy)
    cdf = empirical_cdf(x)
    a1, a2 = alpha_magnitudes(eig.lam1, eig.lam2, eig.lam1**2 + eig.lam2**2, cdf.le, cdf.gt, bp)
    return np.stack(
        [a1 * eig.v1[..., 0], a1 * eig.v1[..., 1], a2 * eig.v2[..., 0], a2 * eig.v2[..., 1]]
    )


def _check_field(field):
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[0] != 4:
        raise ValueError(f"expected a 4-channel field, got shape {field.shape}")
    return field


def render_btf(field, mode="hue", spacing=8) -> np.ndarray:
    """Render a tensor field to an ``(h, w, 3)`` RGB array in [0, 1].

    ``hue``: orientation of the first pole (mod 180 degrees) sets the hue and
    its magnitude sets the value.

    ``glyph``: one ellipse per ``spacing x spacing`` block, semi-axes
    ``0.4 * spacing * a1`` along v1 and ``0.4 * spacing * a2`` along v2,
    sampled from the block centre. Red encodes the vessel pole, blue the
    background pole.
    """
    field = _check_field(field)
    _, h, w = field.shape
    a1 = np.hypot(field[0], field[1])
    if mode == "hue":
        angle = np.mod(np.arctan2(field[1], field[0]), np.pi)
        hsv = np.stack([angle / np.pi, np.ones_like(a1), np.clip(a1, 0, 1)], axis=-1)
        return hsv_to_rgb(hsv)
    if mode != "glyph":
        raise ValueError(f"mode must be 'glyph' or 'hue', got {mode!r}")
    if spacing < 2:
        raise ValueError(f"glyph spacing must be >= 2, got {spacing}")

    a2 = np.hypot(field[2], field[3])
    out = np.zeros((h, w, 3))
    dr, dc = np.mgrid[0:spacing, 0:spacing] - (spacing - 1) / 2.0
    for r0 in range(0, h - spacing + 1, spacing):
        for c0 in range(0, w - spacing + 1, spacing):
            ci, cj = r0 + spacing // 2, c0 + spacing // 2
            m1, m2 = a1[ci, cj], a2[ci, cj]
            if m1 <= 0 and m2 <= 0:
                continue
            u = field[0:2, ci, cj] / m1 if m1 > 0 else np.array([1.0, 0.0])
            v = np.array([-u[1], u[0]])
            s1 = max(0.4 * spacing * m1, 1e-9)
            s2 = max(0.4 * spacing * m2, 1e-9)
            p1 = dr * u[0] + dc * u[1]
            p2 = dr * v[0] + dc * v[1]
            inside = (p1 / s1) ** 2 + (p2 / s2) ** 2 <= 1.0
            total = m1 + m2
            color = np.array([m1 / total, 0.15, m2 / total])
            out[r0 : r0 + spacing, c0 : c0 + spacing][inside] = color
    return out
