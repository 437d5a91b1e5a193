from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from relightkit.envmap import build_env_assets
from relightkit.renderer import GBuffer


def smooth_envmap(rng, height=64, blur=3.0, contrast=2.0):
    """Positive, spatially smooth HDR environment (log-normal field)."""
    noise = rng.normal(size=(height, 2 * height, 3))
    field = gaussian_filter(noise, (blur, blur, 0), mode="wrap")
    field /= field.std()
    return np.exp(contrast * 0.5 * field)


def random_gbuffer(rng, h, w, view=(0.0, 0.0, 1.0), spread=0.5, rough=(0.05, 1.0), min_ndotv=None):
    v = np.asarray(view, dtype=np.float64)
    n = rng.normal(size=(h, w, 3)) * spread + v
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    if min_ndotv is not None:
        # Tilt normals the camera could not see back toward it.
        nd = n @ v
        n += np.maximum(min_ndotv - nd, 0.0)[..., None] * v
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return GBuffer(
        rng.uniform(size=(h, w, 3)),
        n,
        rng.uniform(rough[0], rough[1], (h, w)),
        rng.uniform(size=(h, w)),
    )


@pytest.fixture(scope="session")
def env_assets():
    rng = np.random.default_rng(2024)
    return build_env_assets(smooth_envmap(rng, 64))


@pytest.fixture(scope="session")
def constant_assets():
    return build_env_assets(np.full((64, 128, 3), 1.7))


FIELDS = ("basecolor", "normal", "roughness", "metallic")


def _perturbed(g, field, idx, delta):
    h = g.copy()
    getattr(h, field)[idx] += delta
    return h


def fd_gradient_pairs(g, assets, view, n_pairs, rng, eps=1e-5, rtol=1e-3, kink_tol=0.05):
    """Compare the analytic VJP with central differences on random (pixel, parameter) pairs.

    The scalar probed is ``sum(w * render)`` with random weights ``w``. A pair is
    skipped as non-differentiable when its forward and backward one-sided
    differences disagree by more than ``kink_tol`` (relative). Returns
    ``(passed, checked, skipped)``.
    """
    from relightkit.renderer import render_backward, render_forward

    h, w = g.shape
    weights = rng.uniform(0.5, 1.5, size=(h, w, 3))
    grads = render_backward(g, assets, view, weights)
    f0 = float(np.sum(weights * render_forward(g, assets, view)))
    passed = checked = skipped = 0
    for _ in range(n_pairs):
        field = FIELDS[rng.integers(4)]
        idx = (int(rng.integers(h)), int(rng.integers(w)))
        if field in ("basecolor", "normal"):
            idx = idx + (int(rng.integers(3)),)
        fp = float(np.sum(weights * render_forward(_perturbed(g, field, idx, eps), assets, view)))
        fm = float(np.sum(weights * render_forward(_perturbed(g, field, idx, -eps), assets, view)))
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-8):
            skipped += 1
            continue
        fd = (fp - fm) / (2 * eps)
        an = float(getattr(grads, field)[idx])
        checked += 1
        if abs(an - fd) <= rtol * max(abs(fd), 1e-6) + 1e-9:
            passed += 1
    return passed, checked, skipped


# Delays (seconds) consistent with the published synchronization statistics:
# n = 50, median 38, mean 40.14, max 114.
SYNC_DELAYS = [20.0] * 24 + [38.0, 38.0] + [58.0] * 22 + [61.0, 114.0]
