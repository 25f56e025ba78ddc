"""Frangi vesselness per scale and grid search for the optimal scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_image
from .scalespace import HessianField, ScaleGrid, eig2x2, hessian_at_scale


@dataclass(frozen=True)
class FrangiParams:
    beta: float = 0.5
    c: float = 0.5

    def __post_init__(self):
        if not (self.beta > 0 and self.c > 0):
            raise ValueError(f"beta and c must be > 0, got beta={self.beta}, c={self.c}")


@dataclass
class VesselnessResult:
    vesselness: np.ndarray
    sigma_star: np.ndarray
    hessian: HessianField


def vesselness_from_eigenvalues(lam1, lam2, params: FrangiParams = FrangiParams()):
    lam1 = np.asarray(lam1, dtype=np.float64)
    lam2 = np.asarray(lam2, dtype=np.float64)
    vessel = lam2 < 0
    safe = np.where(vessel, lam2, 1.0)
    rb = np.where(vessel, lam1 / safe, 0.0)
    s2 = lam1**2 + lam2**2
    v = np.exp(-(rb**2) / (2 * params.beta**2)) * (1.0 - np.exp(-s2 / (2 * params.c**2)))
    # lam2 >= 0 covers both the dark-structure branch and the flat lam2 == 0 case.
    return np.where(vessel, v, 0.0)


def vesselness_at_scale(hess: HessianField, params: FrangiParams = FrangiParams()) -> np.ndarray:
    eig = eig2x2(hess.hxx, hess.hxy, hess.hyy)
    return vesselness_from_eigenvalues(eig.lam1, eig.lam2, params)


def multiscale_vesselness(
    x, grid: ScaleGrid = ScaleGrid(), params: FrangiParams = FrangiParams()
) -> VesselnessResult:
    """Per-pixel maximum of vesselness over ``grid``.

    Ties go to the smallest scale. The returned Hessian holds, at each pixel,
    the scale-normalised components at that pixel's optimal scale.
    """
    x = as_image(x)
    sigmas = grid.values()
    if sigmas.size == 0:
        raise ValueError("empty scale grid")
    best_v = None
    for s in sigmas:
        hess = hessian_at_scale(x, s)
        v = vesselness_at_scale(hess, params)
        if best_v is None:
            best_v = v
            best_s = np.full(x.shape, s)
            hxx, hxy, hyy = hess.hxx.copy(), hess.hxy.copy(), hess.hyy.copy()
            continue
        better = v > best_v
        best_v = np.where(better, v, best_v)
        best_s = np.where(better, s, best_s)
        hxx = np.where(better, hess.hxx, hxx)
        hxy = np.where(better, hess.hxy, hxy)
        hyy = np.where(better, hess.hyy, hyy)
    return VesselnessResult(best_v, best_s, HessianField(hxx, hxy, hyy, best_s))
