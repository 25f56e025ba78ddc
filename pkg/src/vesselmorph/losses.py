"""Training objectives with analytic gradients, and the Dice metric.

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the differentiated input. Statistics are whole-image; sums run in numpy's
pairwise order, which is fixed for a given shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SegLossParams:
    delta: float = 1e-6
    clamp: float = 1e-7

    def __post_init__(self):
        if not (self.delta > 0):
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not (0 <= self.clamp < 0.5):
            raise ValueError(f"clamp must lie in [0, 0.5), got {self.clamp}")


@dataclass(frozen=True)
class SsimParams:
    c1: float = 0.01
    c2: float = 0.03

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError(f"c1 and c2 must be > 0, got c1={self.c1}, c2={self.c2}")


@dataclass(frozen=True)
class SimLossParams:
    l1_weight: float = 1.0
    ssim_weight: float = 1.0
    ssim: SsimParams = SsimParams()


@dataclass(frozen=True)
class StructLossParams:
    omega1: float = 1.0
    omega2: float = 5.0

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError(f"weights must be >= 0, got {self.omega1}, {self.omega2}")


def _pair(a, b, names=("a", "b")):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")
    return a, b


def seg_loss(pred, truth, params: SegLossParams = SegLossParams()):
    """Cross-entropy on the positive pixels plus soft Dice.

    ``-(1/N) sum(y log p) + 1 - 2 sum(y p) / (sum(y**2) + sum(p**2) + delta)``
    with ``p`` clamped to ``[clamp, 1 - clamp]``; the gradient is zero where
    the clamp is active.
    """
    pred, y = _pair(pred, truth, ("prediction", "truth"))
    n = pred.size
    lo, hi = params.clamp, 1.0 - params.clamp
    p = np.clip(pred, lo, hi)
    live = (pred >= lo) & (pred <= hi)

    ce = -np.sum(y * np.log(p)) / n
    inter = np.sum(y * p)
    denom = np.sum(y * y) + np.sum(p * p) + params.delta
    value = ce + (1.0 - 2.0 * inter / denom)

    grad = -y / (p * n) - 2.0 * y / denom + 4.0 * inter * p / denom**2
    return value, np.where(live, grad, 0.0)


def ssim(a, b, params: SsimParams = SsimParams()):
    """Global SSIM from whole-image means, variances and covariance.

    Returns ``(value, grad_a, grad_b)``.
    """
    a, b = _pair(a, b)
    n = a.size
    if n < 2:
        raise ValueError("ssim needs at least 2 pixels")
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = np.mean(da * da), np.mean(db * db)
    cov = np.mean(da * db)

    n1 = 2.0 * mu_a * mu_b + params.c1
    n2 = 2.0 * cov + params.c2
    d1 = mu_a**2 + mu_b**2 + params.c1
    d2 = var_a + var_b + params.c2
    value = (n1 * n2) / (d1 * d2)

    grad_a = value * (2.0 * mu_b / n1 + 2.0 * db / n2 - 2.0 * mu_a / d1 - 2.0 * da / d2) / n
    grad_b = value * (2.0 * mu_a / n1 + 2.0 * da / n2 - 2.0 * mu_b / d1 - 2.0 * db / d2) / n
    return value, grad_a, grad_b


def sim_loss(z_s, z_i, params: SimLossParams = SimLossParams()):
    """``sum|z_s - z_i| + (1 - ssim(z_s, z_i))``, differentiated w.r.t. ``z_s`` only."""
    z_s, z_i = _pair(z_s, z_i, ("z_s", "z_i"))
    diff = z_s - z_i
    s, grad_s, _ = ssim(z_s, z_i, params.ssim)
    value = params.l1_weight * np.sum(np.abs(diff)) + params.ssim_weight * (1.0 - s)
    grad = params.l1_weight * np.sign(diff) - params.ssim_weight * grad_s
    return value, grad


def struct_loss(
    pred_s,
    truth,
    z_s,
    z_i,
    params: StructLossParams = StructLossParams(),
    seg_params: SegLossParams = SegLossParams(),
    sim_params: SimLossParams = SimLossParams(),
):
    """Student objective ``omega1 * seg + omega2 * sim``.

    Returns ``(value, grad_pred_s, grad_z_s)``.
    """
    seg, g_pred = seg_loss(pred_s, truth, seg_params)
    sim, g_z = sim_loss(z_s, z_i, sim_params)
    value = params.omega1 * seg + params.omega2 * sim
    return value, params.omega1 * g_pred, params.omega2 * g_z


def dice_score(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    for name, m in (("prediction", pred), ("truth", truth)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} mask must be binary")
    a = pred.astype(bool)
    b = truth.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
