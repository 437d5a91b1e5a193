"""Relighting evaluation: global scale alignment, masked PSNR/SSIM, fold layout."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, correlate1d

from .imaging import as_linear_image, as_mask, tone_map_for_metrics

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LPIPS_REASON = "LPIPS requires a pretrained perceptual network; not computed"


@dataclass(frozen=True)
class Alignment:
    alpha: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    alpha: float
    psnr: float
    ssim: float
    valid_pixels: int
    scene: str = ""
    lighting: str = ""
    degenerate_alignment: bool = False
    lpips: float | None = None
    metadata: dict = field(
        default_factory=lambda: {"ssim_channel": "rgb_mean", "lpips_reason": LPIPS_REASON, "alignment": "global_scalar"}
    )


@dataclass(frozen=True)
class SceneFold:
    held_out: str
    support: tuple


def _valid(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    return as_mask(mask, shape)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def align_scale(pred, gt, mask=None) -> Alignment:
    """Least-squares scalar ``alpha = sum(pred * gt) / sum(pred^2)`` over valid pixels, all channels."""
    pred, gt = _check_pair(pred, gt)
    valid = _valid(pred.shape, mask)
    p = pred[valid]
    denom = float(np.sum(p * p))
    if denom <= 0.0:
        return Alignment(1.0, degenerate=True)
    return Alignment(float(np.sum(p * gt[valid])) / denom)


def psnr(pred, gt, mask=None) -> float:
    """PSNR in dB for data range 1 over valid pixels, capped at 100 dB."""
    pred, gt = _check_pair(pred, gt)
    valid = _valid(pred.shape, mask)
    if not valid.any():
        raise ValueError("psnr: no valid pixels")
    mse = float(np.mean((pred[valid] - gt[valid]) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # Values near the border are discarded by the caller, so the mode is irrelevant.
    return correlate1d(correlate1d(img, k, axis=0, mode="nearest"), k, axis=1, mode="nearest")


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM of the RGB means; only entries whose window fits the image are meaningful."""
    pred, gt = _check_pair(pred, gt)
    x = pred.mean(axis=-1) if pred.ndim == 3 else pred
    y = gt.mean(axis=-1) if gt.ndim == 3 else gt
    k = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = _filter(x, k), _filter(y, k)
    sxx = _filter(x * x, k) - mx * mx
    syy = _filter(y * y, k) - my * my
    sxy = _filter(x * y, k) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, gt, mask=None) -> float:
    """Mean SSIM over valid pixels whose whole 11x11 window is inside the image and valid."""
    pred, gt = _check_pair(pred, gt)
    h, w = pred.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")
    valid = _valid(pred.shape, mask)
    r = SSIM_WINDOW // 2
    usable = binary_erosion(valid, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW), bool), border_value=0)
    usable[:r] = usable[-r:] = False
    usable[:, :r] = usable[:, -r:] = False
    if not usable.any():
        raise ValueError("ssim: no valid pixel has a fully valid window")
    value = float(np.mean(ssim_map(pred, gt)[usable]))
    return max(-1.0, min(1.0, value))


def evaluate_relight(pred_linear, gt_linear, mask=None, *, scene: str = "", lighting: str = "") -> MetricsReport:
    """Align ``pred`` to ``gt`` on linear values, tone-map both, and score the valid pixels."""
    pred = as_linear_image(pred_linear, name="prediction")
    gt = as_linear_image(gt_linear, name="ground truth")
    _check_pair(pred, gt)
    valid = _valid(pred.shape, mask)
    align = align_scale(pred, gt, valid)
    p = tone_map_for_metrics(pred * align.alpha)
    g = tone_map_for_metrics(gt)
    return MetricsReport(
        alpha=align.alpha,
        psnr=psnr(p, g, valid),
        ssim=ssim(p, g, valid),
        valid_pixels=int(valid.sum()),
        scene=scene,
        lighting=lighting,
        degenerate_alignment=align.degenerate,
    )


def leave_one_out_folds(lighting_ids) -> list[SceneFold]:
    """One fold per lighting, in input order; the rest form the support set."""
    ids = [str(i) for i in lighting_ids]
    if len(ids) < 2:
        raise ValueError("leave-one-lighting-out needs at least 2 lightings")
    if len(set(ids)) != len(ids):
        raise ValueError("lighting ids must be unique")
    return [SceneFold(held_out=i, support=tuple(j for j in ids if j != i)) for i in ids]


REPORT_FIELDS = ("scene", "lighting", "alpha", "psnr", "ssim", "lpips", "valid_pixels", "degenerate_alignment")


def _sorted_reports(reports):
    return sorted(reports, key=lambda r: (r.scene, r.lighting))


def aggregate(reports) -> dict:
    reports = list(reports)
    if not reports:
        return {}
    return {
        "scene": "ALL",
        "lighting": "mean",
        "alpha": float(np.mean([r.alpha for r in reports])),
        "psnr": float(np.mean([r.psnr for r in reports])),
        "ssim": float(np.mean([r.ssim for r in reports])),
        "lpips": None,
        "valid_pixels": int(sum(r.valid_pixels for r in reports)),
        "degenerate_alignment": any(r.degenerate_alignment for r in reports),
    }


def write_reports_csv(reports, path) -> None:
    """One row per (scene, lighting) in key order plus a trailing mean row."""
    rows = _sorted_reports(reports)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if getattr(r, k) is None else getattr(r, k)) for k in REPORT_FIELDS})
        agg = aggregate(rows)
        if agg:
            w.writerow({k: ("" if agg[k] is None else agg[k]) for k in REPORT_FIELDS})


def write_reports_json(reports, path) -> None:
    rows = _sorted_reports(reports)
    doc = {"reports": [asdict(r) for r in rows], "aggregate": aggregate(rows)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
