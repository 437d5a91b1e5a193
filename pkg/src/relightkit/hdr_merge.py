"""Merge bracketed linear exposures into a single HDR radiance image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ExposureFrame:
    """A normalized linear frame ``pixels`` in ``[0, 1]`` captured for ``exposure_time`` seconds."""

    pixels: np.ndarray
    exposure_time: float

    def __post_init__(self):
        z = np.asarray(self.pixels, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != 3:
            raise ValueError(f"frame pixels must be (H, W, 3), got {z.shape}")
        if not np.all(np.isfinite(z)) or z.min() < 0.0 or z.max() > 1.0:
            raise ValueError("frame pixels must be finite and within [0, 1]")
        t = float(self.exposure_time)
        if not np.isfinite(t) or t <= 0.0:
            raise ValueError(f"exposure time must be finite and > 0, got {self.exposure_time}")
        object.__setattr__(self, "pixels", z)
        object.__setattr__(self, "exposure_time", t)


@dataclass(frozen=True)
class MergeResult:
    radiance: np.ndarray
    # True where every frame was clipped and the shortest exposure was used as-is.
    saturated: np.ndarray


def triangle_weight(z):
    """Hat weight ``1 - |2z - 1|``: zero at the clip points, one at mid-scale."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(~np.isfinite(z)) or np.any(z < 0.0) or np.any(z > 1.0):
        raise ValueError("triangle_weight is defined on [0, 1]")
    w = 1.0 - np.abs(2.0 * z - 1.0)
    return w if w.ndim else float(w)


def merge_exposures(frames) -> MergeResult:
    """Weighted average of per-frame radiance ``Z / dt`` with triangle weights.

    Weights are per channel. Frames are reduced in ascending exposure-time order
    (ties broken by pixel content) so the result does not depend on the input
    order. Channels with zero total weight fall back to the shortest exposure's
    raw ``Z / dt`` and are flagged in ``saturated``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("exposure stack is empty")
    shape = frames[0].pixels.shape
    for i, f in enumerate(frames):
        if f.pixels.shape != shape:
            raise ValueError(f"frame {i} has shape {f.pixels.shape}, expected {shape}")

    order = sorted(range(len(frames)), key=lambda i: (frames[i].exposure_time, frames[i].pixels.tobytes()))
    ordered = [frames[i] for i in order]

    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    for f in ordered:
        w = triangle_weight(f.pixels)
        num += w * (f.pixels / f.exposure_time)
        den += w

    saturated = den <= 0.0
    shortest = ordered[0]
    fallback = shortest.pixels / shortest.exposure_time
    with np.errstate(invalid="ignore", divide="ignore"):
        radiance = np.where(saturated, fallback, num / np.where(saturated, 1.0, den))
    return MergeResult(radiance=radiance, saturated=np.any(saturated, axis=-1))
