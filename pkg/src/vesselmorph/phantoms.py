"""Synthetic vessel phantoms with exact masks and controllable domain shift.

Tubes have a parabolic cross-section ``1 - (2d/w)**2`` for distance ``d``
from the centre curve and width ``w``; the mask is exactly ``d < w/2``.
Images are quantised to multiples of 2**-16 so polarity inversion is an
exact involution in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .core import Rng

QUANTUM = 2.0**-16


@dataclass(frozen=True)
class DomainDescriptor:
    name: str = "source"
    contrast: float = 0.8
    noise: float = 0.05
    background: float = 0.1
    polarity: str = "bright"
    width_min: float = 3.0
    width_max: float = 6.0
    curves_min: int = 2
    curves_max: int = 4
    straight: bool = False

    def __post_init__(self):
        if self.width_min < 1 or self.width_max < self.width_min:
            raise ValueError(
                f"width range must satisfy 1 <= min <= max, got [{self.width_min}, {self.width_max}]"
            )
        if self.polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not (1 <= self.curves_min <= self.curves_max):
            raise ValueError("curve count range must satisfy 1 <= min <= max")

    def as_dict(self):
        return asdict(self)


# Source plus the three shift types: modality (polarity), resolution (width), pathology (contrast).
DOMAINS = {
    "source": DomainDescriptor("source"),
    "inverted": DomainDescriptor(
        "inverted", contrast=0.7, noise=0.06, background=0.15, polarity="dark"
    ),
    "wide": DomainDescriptor("wide", width_min=6.0, width_max=12.0),
    "lowcontrast": DomainDescriptor("lowcontrast", contrast=0.35),
}


@dataclass
class PhantomSample:
    image: np.ndarray
    mask: np.ndarray
    domain: DomainDescriptor
    sample_id: str = ""


def quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) / QUANTUM) * QUANTUM


def segment_distance(shape, points):
    """Distance from every pixel centre to the polyline through ``points`` (n, 2)."""
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    p = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    a, b = points[:-1], points[1:]
    ab = b - a
    len2 = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    best = np.full(p.shape[0], np.inf)
    # chunk over segments to bound memory
    for s in range(0, len(a), 64):
        aa, vv, ll = a[s : s + 64], ab[s : s + 64], len2[s : s + 64]
        ap = p[:, None, :] - aa[None]
        t = np.clip(np.sum(ap * vv[None], axis=2) / ll[None], 0.0, 1.0)
        d = ap - t[..., None] * vv[None]
        best = np.minimum(best, np.sqrt(np.min(np.sum(d * d, axis=2), axis=1)))
    return best.reshape(shape)


def tube_profile(dist, width):
    return np.clip(1.0 - (2.0 * dist / width) ** 2, 0.0, None)


def render_tubes(shape, polylines, widths):
    """Union of tubes: returns (profile image in [0, 1], boolean mask)."""
    prof = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for pts, w in zip(polylines, widths):
        d = segment_distance(shape, pts)
        prof = np.maximum(prof, tube_profile(d, w))
        mask |= d < w / 2.0
    return prof, mask


def _random_curve(size, rng: Rng, straight: bool):
    u = rng.uniform(8)
    # endpoints on two different image borders, interior control points
    side_a = int(u[0] * 4)
    side_b = (side_a + 1 + int(u[1] * 3)) % 4

    def border(side, t):
        t = t * (size - 1)
        return [(0.0, t), (t, size - 1.0), (size - 1.0, t), (t, 0.0)][side]

    p0 = np.array(border(side_a, u[2]))
    p3 = np.array(border(side_b, u[3]))
    if straight:
        c1, c2 = p0 + (p3 - p0) / 3.0, p0 + 2.0 * (p3 - p0) / 3.0
    else:
        c1 = np.array([u[4], u[5]]) * (size - 1)
        c2 = np.array([u[6], u[7]]) * (size - 1)
    t = np.linspace(0.0, 1.0, 4 * size)[:, None]
    return (
        (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * c1 + 3 * (1 - t) * t**2 * c2 + t**3 * p3
    )


def compose(profile, domain: DomainDescriptor, noise):
    bright = quantize(domain.background + domain.contrast * profile + noise)
    return 1.0 - bright if domain.polarity == "dark" else bright


def generate_phantoms(count, domain: DomainDescriptor = DomainDescriptor(), seed=0, size=64):
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 4:
        raise ValueError(f"size must be >= 4, got {size}")
    rng = Rng(seed)
    out = []
    for k in range(count):
        n_curves = domain.curves_min + int(
            rng.next_uniform() * (domain.curves_max - domain.curves_min + 1)
        )
        curves, widths = [], []
        for _ in range(n_curves):
            curves.append(_random_curve(size, rng, domain.straight))
            widths.append(domain.width_min + (domain.width_max - domain.width_min) * rng.next_uniform())
        prof, mask = render_tubes((size, size), curves, widths)
        noise = domain.noise * rng.normal(size * size).reshape(size, size)
        image = compose(prof, domain, noise)
        out.append(PhantomSample(image, mask.astype(np.uint8), domain, f"{domain.name}-{k:04d}"))
    return out


def bar_phantom(size, width, noise=0.0, seed=0, contrast=1.0, background=0.0, center=None):
    """Single vertical bright bar centred on column ``center`` (default ``size // 2``)."""
    center = size // 2 if center is None else center
    cols = np.arange(size, dtype=np.float64)
    d = np.broadcast_to(np.abs(cols - center), (size, size))
    prof = tube_profile(d, width)
    mask = (d < width / 2.0).astype(np.uint8)
    n = noise * Rng(seed).normal(size * size).reshape(size, size) if noise else 0.0
    image = quantize(background + contrast * prof + n)
    return PhantomSample(image, mask, DomainDescriptor("bar", contrast, noise, background,
                                                        width_min=width, width_max=width,
                                                        curves_min=1, curves_max=1,
                                                        straight=True))
