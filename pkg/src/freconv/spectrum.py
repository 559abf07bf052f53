"""Energy spectra of feature planes.

Convention: unnormalized forward DFT, so for a plane ``x`` of size H x W,
``energy.sum() == H * W * (x ** 2).sum()``. Maps are DC-centred, with zero
frequency at ``(H // 2, W // 2)``. Radii are normalized per axis so that the
Nyquist frequency sits at radius 1 along both axes, which makes bands
elliptical on non-square planes.
"""
from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

DFT_CONVENTION = "unnormalized-forward"


@dataclass
class SpectrumMap:
    grid: np.ndarray
    layer: str | None = None
    image_count: int = 1
    meta: dict = field(default_factory=lambda: {"dft": DFT_CONVENTION, "dc": "centered"})


@dataclass
class RadialProfile:
    bins: list  # (radius_lo, radius_hi, mean energy)


def fft2_energy(plane) -> SpectrumMap:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ShapeError(f"expected a non-empty 2D plane, got shape {plane.shape}")
    f = np.fft.fftshift(np.fft.fft2(plane))
    return SpectrumMap(np.abs(f) ** 2)


def dft2_direct(plane) -> np.ndarray:
    """Centred energy map by the O(N^4) DFT sum; oracle for :func:`fft2_energy`."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    out = np.zeros((h, w))
    for ku in range(h):
        for kv in range(w):
            acc = 0j
            for y in range(h):
                for x in range(w):
                    acc += plane[y, x] * np.exp(-2j * np.pi * (ku * y / h + kv * x / w))
            out[(ku + h // 2) % h, (kv + w // 2) % w] = abs(acc) ** 2
    return out


def average_spectrum(features: Iterable, layer: str | None = None) -> SpectrumMap:
    """Mean energy map over every channel of every image in ``features``.

    Items are rank-4 tensors, or mappings from layer id to tensor when
    ``layer`` selects one of them.
    """
    total = None
    count = 0
    images = 0
    for item in features:
        t = item[layer] if isinstance(item, Mapping) else item
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 2:
            t = t[None, None]
        if t.ndim != 4:
            raise ShapeError(f"feature tensors must be rank 4, got shape {t.shape}")
        if total is not None and t.shape[2:] != total.shape:
            raise ShapeError(f"inconsistent spatial shape {t.shape[2:]} vs {total.shape}")
        f = np.fft.fftshift(np.fft.fft2(t, axes=(2, 3)), axes=(2, 3))
        e = (np.abs(f) ** 2).sum(axis=(0, 1))
        total = e if total is None else total + e
        count += t.shape[0] * t.shape[1]
        images += t.shape[0]
    if total is None or count == 0:
        raise ShapeError("no feature planes to average")
    return SpectrumMap(total / count, layer, images)


def normalized_radius(h: int, w: int) -> np.ndarray:
    """Radius of every centred bin in units of the Nyquist frequency."""
    fy = (np.arange(h) - h // 2) / h
    fx = (np.arange(w) - w // 2) / w
    return np.sqrt((fy[:, None] / 0.5) ** 2 + (fx[None, :] / 0.5) ** 2)


def band_energy_ratio(spec: SpectrumMap, split_radius_fraction: float = 0.5) -> float:
    """High-band over low-band energy; the DC bin is in the low band.

    Returns ``inf`` when the low band carries no energy.
    """
    if not 0 < split_radius_fraction < 1:
        raise ParameterError(f"split fraction must lie in (0, 1), got {split_radius_fraction}")
    grid = spec.grid
    rho = normalized_radius(*grid.shape)
    low = float(grid[rho <= split_radius_fraction].sum())
    high = float(grid[rho > split_radius_fraction].sum())
    if low == 0.0:
        return float("inf")
    return high / low


def band_area_ratio(h: int, w: int, split_radius_fraction: float = 0.5) -> float:
    """Bin-count ratio of the two bands: the expected ratio for a flat spectrum."""
    rho = normalized_radius(h, w)
    return float((rho > split_radius_fraction).sum() / (rho <= split_radius_fraction).sum())


def radial_profile(spec: SpectrumMap, bins: int = 16) -> RadialProfile:
    """Mean energy per radial band; bands split [0, 1] evenly and the last
    band also absorbs the corner bins beyond the Nyquist radius."""
    if bins < 1:
        raise ParameterError(f"need at least one bin, got {bins}")
    rho = normalized_radius(*spec.grid.shape)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, rho.ravel(), side="right") - 1, 0, bins - 1)
    sums = np.bincount(idx, weights=spec.grid.ravel(), minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    means = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    return RadialProfile([(float(edges[i]), float(edges[i + 1]), float(means[i])) for i in range(bins)])


def write_map_csv(path, spec: SpectrumMap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in spec.grid:
            writer.writerow([repr(float(v)) for v in row])


def write_profile_csv(path, profile: RadialProfile) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius_lo", "radius_hi", "energy"])
        for lo, hi, e in profile.bins:
            writer.writerow([repr(lo), repr(hi), repr(e)])
