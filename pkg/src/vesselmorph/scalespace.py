"""Gaussian-derivative filtering, scale-normalised Hessians and 2x2 eigen analysis.

Axis 0 (rows) is the first coordinate throughout: ``hxx`` is the second
derivative along rows and eigenvectors are ``(row, col)`` components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import as_image

BORDER_MODE = "mirror"


@dataclass(frozen=True)
class ScaleGrid:
    sigma_min: float = 1.0
    sigma_max: float = 5.0
    step: float = 0.5

    def __post_init__(self):
        if not (self.sigma_min > 0):
            raise ValueError(f"sigma_min must be > 0, got {self.sigma_min}")
        if self.sigma_max < self.sigma_min:
            raise ValueError(
                f"sigma_max ({self.sigma_max}) must be >= sigma_min ({self.sigma_min})"
            )
        if not (self.step > 0):
            raise ValueError(f"step must be > 0, got {self.step}")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.sigma_max - self.sigma_min) / self.step + 1e-9)) + 1
        return self.sigma_min + self.step * np.arange(n)


@dataclass
class HessianField:
    """Scale-normalised Hessian components; ``sigma`` is a scalar or a per-pixel map."""

    hxx: np.ndarray
    hxy: np.ndarray
    hyy: np.ndarray
    sigma: float | np.ndarray

    def frobenius_sq(self) -> np.ndarray:
        return self.hxx**2 + 2.0 * self.hxy**2 + self.hyy**2

    def stack(self) -> np.ndarray:
        return np.stack([self.hxx, self.hxy, self.hyy])


@dataclass
class EigenPair:
    """Per-pixel eigen decomposition with ``|lam1| <= |lam2|``; vectors have a trailing axis of 2."""

    lam1: np.ndarray
    lam2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray


def _gaussian_1d(sigma):
    r = int(math.ceil(4.0 * sigma))
    k = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(k**2) / (2.0 * sigma**2)) / (math.sqrt(2.0 * math.pi) * sigma)
    d1 = -k / sigma**2 * g
    d2 = (k**2 / sigma**4 - 1.0 / sigma**2) * g
    return k, g, d1, d2


def _moment_corrected(sigma):
    """Sampled 1D Gaussian, first and second derivative with exact discrete moments.

    Truncating at ``ceil(4 sigma)`` leaves the raw samples with a nonzero
    sum for the second derivative (~1e-3 / sigma**2) and a second moment
    off by ~1%, which wrecks the response to polynomials. Corrections are
    added on the off-centre taps only, so the centre samples keep their
    analytic values:

    * smoothing: sum = 1
    * first derivative: sum(k * d1) = -1 (odd symmetry keeps sum = 0)
    * second derivative: sum = 0 and sum(k**2 * d2) = 2
    """
    k, g, d1, d2 = _gaussian_1d(sigma)
    off = k != 0

    basis = np.where(off, g, 0.0)
    g = g + basis * (1.0 - g.sum()) / basis.sum()

    d1 = d1 * (-1.0 / np.sum(k * d1))
    d1 = 0.5 * (d1 - d1[::-1])

    # Two off-centre basis shapes fix the zeroth and second moment of d2.
    b0 = np.where(off, g, 0.0)
    b2 = np.where(off, k**2 * g, 0.0)
    a = np.array([[b0.sum(), b2.sum()], [np.sum(k**2 * b0), np.sum(k**2 * b2)]])
    rhs = np.array([-d2.sum(), 2.0 - np.sum(k**2 * d2)])
    c0, c2 = np.linalg.solve(a, rhs)
    d2 = d2 + c0 * b0 + c2 * b2
    d2 = 0.5 * (d2 + d2[::-1])
    return g, d1, d2


def gaussian_second_derivative_kernels(sigma: float):
    """2D kernels ``(Gxx, Gxy, Gyy)`` on a ``(2r+1)**2`` support with ``r = ceil(4 sigma)``.

    Each kernel is the outer product of 1D sampled Gaussian derivatives
    (see :func:`_moment_corrected`); the centre tap of ``Gxx`` equals the
    analytic ``-1 / (2 pi sigma**4)``.
    """
    if not (sigma > 0):
        raise ValueError(f"sigma must be > 0, got {sigma}")
    g, d1, d2 = _moment_corrected(float(sigma))
    return np.outer(d2, g), np.outer(d1, d1), np.outer(g, d2)


def hessian_at_scale(x, sigma: float) -> HessianField:
    """``sigma**2`` times the image convolved with each second-derivative kernel.

    The kernels are separable so the convolution runs as two 1D passes with
    mirror borders.
    """
    if not (sigma > 0):
        raise ValueError(f"sigma must be > 0, got {sigma}")
    x = as_image(x)
    g, d1, d2 = _moment_corrected(float(sigma))

    def sep(kr, kc):
        tmp = ndimage.convolve1d(x, kr, axis=0, mode=BORDER_MODE)
        return ndimage.convolve1d(tmp, kc, axis=1, mode=BORDER_MODE)

    s2 = float(sigma) ** 2
    return HessianField(s2 * sep(d2, g), s2 * sep(d1, d1), s2 * sep(g, d2), float(sigma))


def _canonical(vx, vy):
    flip = (vx < 0) | ((vx == 0) & (vy < 0))
    vx = np.where(flip, -vx, vx) + 0.0
    vy = np.where(flip, -vy, vy) + 0.0
    return vx, vy


def eig2x2(hxx, hxy, hyy) -> EigenPair:
    """Closed-form eigen decomposition of symmetric 2x2 matrices, elementwise.

    Eigenvalues are ``mean +- sqrt(((hxx - hyy)/2)**2 + hxy**2)`` and the
    eigenvector of the larger one sits at angle ``0.5 * atan2(2 hxy, hxx - hyy)``.
    Output is ordered so ``|lam1| <= |lam2|`` (equal moduli keep the larger
    signed value first). Each vector is flipped so its first nonzero
    component is positive; a repeated eigenvalue yields ``v1 = (1, 0)``,
    ``v2 = (0, 1)``.
    """
    hxx = np.asarray(hxx, dtype=np.float64)
    hxy = np.asarray(hxy, dtype=np.float64)
    hyy = np.asarray(hyy, dtype=np.float64)
    mean = 0.5 * (hxx + hyy)
    half_diff = 0.5 * (hxx - hyy)
    rad = np.hypot(half_diff, hxy)
    lam_hi = mean + rad
    lam_lo = mean - rad
    theta = 0.5 * np.arctan2(hxy, half_diff)
    c, s = np.cos(theta), np.sin(theta)
    # atan2(0, 0) = 0 already gives the fixed basis for repeated eigenvalues.
    hi_first = np.abs(lam_hi) <= np.abs(lam_lo)
    lam1 = np.where(hi_first, lam_hi, lam_lo)
    lam2 = np.where(hi_first, lam_lo, lam_hi)
    v1x, v1y = np.where(hi_first, c, -s), np.where(hi_first, s, c)
    v2x, v2y = np.where(hi_first, -s, c), np.where(hi_first, c, s)
    v1 = np.stack(_canonical(v1x, v1y), axis=-1)
    v2 = np.stack(_canonical(v2x, v2y), axis=-1)
    return EigenPair(lam1, lam2, v1, v2)
