"""Scene/envmap capture synchronization checks.

The sun moves about 15 degrees per hour (0.00417 deg/s), so a delay between the
scene photo and the environment capture displaces the dominant light source by
``dt * 0.00417`` degrees, i.e. ``theta / (360 / width)`` envmap pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

SOLAR_RATE_DEG_PER_S = 0.00417
SUN_DIAMETER_DEG = 0.5
HISTOGRAM_BIN_S = 20.0
DEFAULT_ENVMAP_WIDTH = 256


@dataclass(frozen=True)
class CaptureRecord:
    scene: str
    lighting: str
    scene_timestamp: float
    envmap_timestamp: float

    def __post_init__(self):
        if not (math.isfinite(self.scene_timestamp) and math.isfinite(self.envmap_timestamp)):
            raise ValueError(f"{self.scene}/{self.lighting}: timestamps must be finite")

    @property
    def delay(self) -> float:
        return abs(self.scene_timestamp - self.envmap_timestamp)


@dataclass
class SyncReport:
    median: float
    mean: float
    max: float
    envmap_width: int
    records: list = field(default_factory=list)  # dicts: scene, lighting, dt, theta_deg, pixel_shift, flagged
    bin_edges: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    threshold_deg: float = SUN_DIAMETER_DEG

    @property
    def flagged(self) -> list:
        return [r for r in self.records if r["flagged"]]


def solar_displacement(dt: float, envmap_width: int = DEFAULT_ENVMAP_WIDTH) -> tuple[float, float]:
    """Angular sun displacement (degrees) and envmap pixel shift for a delay of ``dt`` seconds."""
    if not dt >= 0:
        raise ValueError(f"delay must be >= 0 seconds, got {dt}")
    if envmap_width < 1:
        raise ValueError("envmap width must be >= 1")
    theta = dt * SOLAR_RATE_DEG_PER_S
    return theta, theta / (360.0 / envmap_width)


def delay_histogram(delays, bin_width: float = HISTOGRAM_BIN_S):
    """Counts in fixed ``[k w, (k + 1) w)`` bins from 0 to past the largest delay."""
    d = np.asarray(delays, dtype=np.float64)
    nbins = max(1, int(math.floor(d.max() / bin_width)) + 1)
    edges = [i * bin_width for i in range(nbins + 1)]
    idx = np.minimum((d // bin_width).astype(int), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    return edges, [int(c) for c in counts]


def sync_stats(
    records, envmap_width: int = DEFAULT_ENVMAP_WIDTH, threshold_deg: float = SUN_DIAMETER_DEG
) -> SyncReport:
    records = list(records)
    if not records:
        raise ValueError("sync_stats needs at least one capture record")
    delays = np.sort(np.array([r.delay for r in records], dtype=np.float64))
    rows = []
    for r in sorted(records, key=lambda r: (r.scene, r.lighting)):
        theta, shift = solar_displacement(r.delay, envmap_width)
        rows.append(
            {
                "scene": r.scene,
                "lighting": r.lighting,
                "dt": r.delay,
                "theta_deg": theta,
                "pixel_shift": shift,
                "flagged": theta > threshold_deg,
            }
        )
    edges, counts = delay_histogram(delays)
    return SyncReport(
        median=float(np.median(delays)),
        mean=float(math.fsum(delays) / len(delays)),
        max=float(delays[-1]),
        envmap_width=envmap_width,
        records=rows,
        bin_edges=edges,
        counts=counts,
        threshold_deg=threshold_deg,
    )


def write_sync_csv(report: SyncReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "lighting", "dt_s", "theta_deg", "pixel_shift", "flagged"])
        for r in report.records:
            w.writerow([r["scene"], r["lighting"], r["dt"], r["theta_deg"], r["pixel_shift"], int(r["flagged"])])


def write_summary_csv(report: SyncReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["median_dt_s", f"{report.median:.2f}"])
        w.writerow(["mean_dt_s", f"{report.mean:.2f}"])
        w.writerow(["max_dt_s", f"{report.max:.2f}"])
        theta, shift = solar_displacement(report.max, report.envmap_width)
        w.writerow(["max_theta_deg", f"{theta:.4f}"])
        w.writerow([f"max_pixel_shift_at_{report.envmap_width}px", f"{shift:.4f}"])
        w.writerow(["flagged_records", len(report.flagged)])


def write_histogram_csv(report: SyncReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_s", "bin_end_s", "count"])
        for lo, hi, c in zip(report.bin_edges, report.bin_edges[1:], report.counts):
            w.writerow([lo, hi, c])


def histogram_svg(report: SyncReport, width: int = 480, height: int = 240) -> str:
    """Minimal SVG bar chart of the delay histogram."""
    pad = 30
    n = len(report.counts)
    top = max(report.counts) or 1
    bar_w = (width - 2 * pad) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, c in enumerate(report.counts):
        h = (height - 2 * pad) * c / top
        x = pad + i * bar_w
        parts.append(
            f'<rect x="{x:.2f}" y="{height - pad - h:.2f}" width="{bar_w * 0.9:.2f}" height="{h:.2f}" fill="steelblue">'
            f"<title>{report.bin_edges[i]:g}-{report.bin_edges[i + 1]:g} s: {c}</title></rect>"
        )
        parts.append(
            f'<text x="{x:.2f}" y="{height - pad + 14}" font-size="10">{report.bin_edges[i]:g}</text>'
        )
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 4}" font-size="11" text-anchor="middle">delay (s)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
