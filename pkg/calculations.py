"""Shared SAR radiometry and raster-geometry calculations."""
from __future__ import annotations

import math

import numpy as np


def db_from_linear(intensity: np.ndarray) -> np.ndarray:
    """Backscatter intensity to decibels; non-positive values become NaN."""
    intensity = np.asarray(intensity, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10 * np.log10(intensity)
    return np.where(intensity > 0, out, np.nan)


def linear_from_db(value_db: np.ndarray) -> np.ndarray:
    """Decibels back to linear intensity."""
    return 10 ** (np.asarray(value_db, dtype=np.float64) / 10)


def scene_footprint_km(width_px: int, height_px: int, pixel_spacing_m: float) -> tuple[float, float]:
    """Ground extent (width, height) of a scene in km."""
    if width_px <= 0 or height_px <= 0 or pixel_spacing_m <= 0:
        return float("nan"), float("nan")
    return width_px * pixel_spacing_m / 1000, height_px * pixel_spacing_m / 1000


def patch_footprint_m(patch_size_px: int, pixel_spacing_m: float) -> float:
    if patch_size_px <= 0 or pixel_spacing_m <= 0:
        return float("nan")
    return patch_size_px * pixel_spacing_m


def gaussian_taper(freq: np.ndarray, correlation_length_px: float) -> np.ndarray:
    """Gaussian spectral taper giving a field the requested correlation length.

    Equals 1 at zero frequency and 1/e at freq = 1/(pi * length). A length of 0
    leaves the spectrum untouched (white field).
    """
    if correlation_length_px <= 0:
        return np.ones_like(freq, dtype=np.float64)
    return np.exp(-((math.pi * correlation_length_px * freq) ** 2))


def proportions(counts: np.ndarray) -> np.ndarray:
    """Normalise counts to proportions; an all-zero vector stays zero."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    return counts / total


def l1_distance(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())
