"""Gaussian low-pass filtering and the two-band CT decomposition.

The high band is whatever the low-pass removes: ``high = v - lowpass(v)``.
The low band is rounded to float32 precision and the subtraction is done in
float64, which makes it exact for float32 sources, so ``low + high``
reproduces the source bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError
from .volume import Domain, Volume

CT_DOMAINS = (Domain.CT_HU, Domain.CT_NORM)


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 15.0
    radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ArgumentError(f"sigma must be positive, got {self.sigma}")
        if self.radius is not None and self.radius < 1:
            raise ArgumentError(f"radius must be >= 1, got {self.radius}")

    @property
    def taps_radius(self):
        return self.radius if self.radius is not None else max(1, math.ceil(3 * self.sigma))

    def taps(self):
        r = self.taps_radius
        x = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-0.5 * (x / self.sigma) ** 2)
        return w / w.sum()


@dataclass
class FrequencyPair:
    low: Volume
    high: Volume


def filter_axis(data, taps, axis):
    """Correlate ``data`` with odd-length ``taps`` along ``axis``, replicating edges."""
    r = len(taps) // 2
    pads = [(0, 0)] * data.ndim
    pads[axis] = (r, r)
    padded = np.pad(data, pads, mode="edge")
    n = data.shape[axis]
    out = np.zeros(data.shape, dtype=np.float64)
    for i, t in enumerate(taps):
        out += t * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def lowpass_array(data, spec):
    taps = spec.taps()
    out = np.asarray(data, dtype=np.float64)
    for axis in range(out.ndim):
        out = filter_axis(out, taps, axis)
    return out


def gaussian_lowpass(volume, spec=GaussianSpec()):
    """Separable Gaussian blur (depth, height, width passes) with unit DC gain."""
    if not np.all(np.isfinite(volume.data)):
        raise ArgumentError("volume contains non-finite values")
    low = lowpass_array(volume.data, spec)
    return volume.like(low.astype(volume.data.dtype))


def decompose(volume, spec=GaussianSpec()):
    """Split a CT volume into low- and high-frequency bands."""
    if volume.domain not in CT_DOMAINS:
        raise DomainError(f"decompose expects a CT volume, got {volume.domain.name}")
    if not np.all(np.isfinite(volume.data)):
        raise ArgumentError("volume contains non-finite values")
    source = volume.data.astype(np.float64)
    low = lowpass_array(source, spec).astype(np.float32).astype(np.float64)
    high = source - low
    return FrequencyPair(
        low=volume.like(low, Domain.CT_LOWFREQ),
        high=volume.like(high, Domain.CT_HIGHFREQ),
    )


def high_band_energy_fraction(volume, spec):
    """||high||^2 / ||v - mean(v)||^2 for a CT volume (0 for constant volumes)."""
    pair = decompose(volume, spec)
    centered = volume.data.astype(np.float64) - volume.data.mean(dtype=np.float64)
    denom = float(np.sum(centered**2))
    return 0.0 if denom == 0 else float(np.sum(pair.high.data**2)) / denom
