"""Synthetic labeled scenes: textured land, bright elliptical clouds, offset shadows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError
from .scene import (BAND_NAMES, RAW_CLEAR, RAW_CLOUD, RAW_NODATA, RAW_SHADOW, BandStack,
                    binarize_labels)

# typical unit-scale surface reflectance per band
BACKGROUNDS = {
    "vegetation": (0.04, 0.05, 0.08, 0.06, 0.32, 0.18, 0.09),
    "barren": (0.10, 0.12, 0.17, 0.22, 0.28, 0.34, 0.28),
    "cropland": (0.06, 0.07, 0.10, 0.10, 0.26, 0.22, 0.14),
    "urban": (0.09, 0.10, 0.12, 0.13, 0.20, 0.21, 0.18),
}
CLOUD_REFLECTANCE = (0.78, 0.78, 0.76, 0.75, 0.74, 0.60, 0.48)


@dataclass
class SynthSpec:
    width: int = 256
    height: int = 256
    seed: int = 0
    # expected number of clouds per scene-sized area (Poisson)
    cloud_count: float = 10.0
    cloud_radius: tuple = (8.0, 22.0)
    cloud_alpha: tuple = (0.55, 1.0)
    shadow_offset: tuple = (32, 34)
    shadow_factor: float = 0.35
    background: str = "vegetation"
    bands: tuple = BAND_NAMES
    # relative standard deviation of the smooth land texture
    texture_amplitude: float = 0.25
    texture_sigma: float = 6.0
    noise_std: float = 0.006
    nodata_border: int = 0

    def __post_init__(self):
        if self.width < 15 or self.height < 15:
            raise ConfigurationError("synthetic scenes must be at least 15x15")
        numbers = [self.cloud_count, *self.cloud_radius, *self.cloud_alpha, self.shadow_factor,
                   self.texture_amplitude, self.texture_sigma, self.noise_std, self.nodata_border]
        if any(v < 0 for v in numbers):
            raise ConfigurationError("synthetic distribution parameters must be nonnegative")
        if self.cloud_radius[0] > self.cloud_radius[1] or self.cloud_alpha[0] > self.cloud_alpha[1]:
            raise ConfigurationError("range parameters must be (low, high)")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"unknown background {self.background!r}; choose from {sorted(BACKGROUNDS)}")
        unknown = [b for b in self.bands if b not in BAND_NAMES]
        if unknown:
            raise ConfigurationError(f"unknown bands {unknown}")

    def expected_coverage(self):
        """Expected cloud_shadow fraction away from the scene edges.

        Cloud centers form a Poisson process over a domain padded past every
        edge, so cloud and shadow sets are stationary Boolean models. When the
        shadow offset exceeds the largest cloud diameter the two are
        independent and the uncovered probability squares.
        """
        mean_axis = 0.5 * (self.cloud_radius[0] + self.cloud_radius[1])
        density = self.cloud_count / (self.width * self.height)
        return 1.0 - math.exp(-2.0 * density * math.pi * mean_axis ** 2)


def _texture(rng, shape, sigma):
    field_ = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def generate_synthetic(spec):
    """Render ``(BandStack, MaskRaster)``; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    dr, dc = spec.shadow_offset
    rmax = spec.cloud_radius[1]
    r0, r1 = -rmax - max(dr, 0), h + rmax - min(dr, 0)
    c0, c1 = -rmax - max(dc, 0), w + rmax - min(dc, 0)
    area_ratio = (r1 - r0) * (c1 - c0) / (h * w)
    n = rng.poisson(spec.cloud_count * area_ratio)
    centers = np.column_stack([rng.uniform(r0, r1, n), rng.uniform(c0, c1, n)])
    axes = rng.uniform(*spec.cloud_radius, size=(n, 2))
    angles = rng.uniform(0, np.pi, n)
    alphas = rng.uniform(*spec.cloud_alpha, n)

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]

    def ellipse(cr, cc, a, b, theta):
        y, x = rows - cr, cols - cc
        ct, st = math.cos(theta), math.sin(theta)
        u = (x * ct + y * st) / a
        v = (y * ct - x * st) / b
        return u * u + v * v <= 1.0

    cloud = np.zeros((h, w), dtype=bool)
    shadow = np.zeros((h, w), dtype=bool)
    opacity = np.zeros((h, w))
    for (cr, cc), (a, b), theta, alpha in zip(centers, axes, angles, alphas):
        inside = ellipse(cr, cc, a, b, theta)
        cloud |= inside
        opacity[inside] = np.maximum(opacity[inside], alpha)
        shadow |= ellipse(cr + dr, cc + dc, a, b, theta)

    profile = np.asarray(BACKGROUNDS[spec.background])
    bright = np.asarray(CLOUD_REFLECTANCE)
    idx = [BAND_NAMES.index(b) for b in spec.bands]
    shared = _texture(rng, (h, w), spec.texture_sigma)
    planes = []
    for i in idx:
        own = _texture(rng, (h, w), spec.texture_sigma)
        bg = profile[i] * (1.0 + spec.texture_amplitude * (0.8 * shared + 0.6 * own))
        bg = np.maximum(bg + rng.normal(0, spec.noise_std, (h, w)), 0.0)
        bg = np.where(shadow, bg * spec.shadow_factor, bg)
        planes.append((1 - opacity) * bg + opacity * bright[i])
    data = np.clip(np.stack(planes), 0.0, 1.5).astype(np.float32)

    raw = np.full((h, w), RAW_CLEAR, dtype=np.uint8)
    raw[shadow] = RAW_SHADOW
    raw[cloud] = RAW_CLOUD
    nodata = np.zeros((h, w), dtype=bool)
    if spec.nodata_border:
        k = spec.nodata_border
        nodata[:k, :] = nodata[-k:, :] = True
        nodata[:, :k] = nodata[:, -k:] = True
        raw[nodata] = RAW_NODATA
    data[:, nodata] = 0.0
    return BandStack(data, tuple(spec.bands), nodata), binarize_labels(raw)
