"""Inverse rendering: G-buffer recovery from an observed linear image.

Two routes share the same measurement loss (mean squared residual between the
render and the observation over valid pixels):

* :func:`optimize_gbuffer`, projected gradient descent directly on the
  G-buffer;
* :func:`dps_sample`, a DDIM sampler over a latent whose clean estimate is
  decoded to a G-buffer, rendered, and pulled toward the observation by the
  loss gradient at every step (diffusion posterior sampling).

The denoiser is only called, never differentiated: the guidance gradient uses
``d x0_hat / d x_t = 1 / sqrt(alpha_bar_t)`` with the noise prediction held fixed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .envmap import EnvAssets
from .imaging import as_mask
from .renderer import ROUGHNESS_MIN, GBuffer, GBufferGradients, render_forward, render_with_grad

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


# --------------------------------------------------------------------------
# measurement loss


def _valid_mask(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    return as_mask(mask, shape)


def _residual_loss(observed: np.ndarray, valid: np.ndarray):
    count = int(valid.sum())
    if count == 0:
        raise ValueError("measurement loss: no valid pixels")
    weight = valid[..., None] / (3.0 * count)

    def loss_fn(rendered):
        res = rendered - observed
        return float(np.sum(weight * res * res)), 2.0 * weight * res

    return loss_fn


def measurement_loss(g: GBuffer, assets: EnvAssets, view, observed, mask=None):
    """Mean squared render residual over valid pixels and its G-buffer gradient.

    Returns ``(loss, GBufferGradients)``.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != g.shape + (3,):
        raise ValueError(f"observed image shape {observed.shape} does not match G-buffer {g.shape}")
    valid = _valid_mask(g.shape, mask)
    _, loss, grads = render_with_grad(g, assets, view, _residual_loss(observed, valid))
    return loss, grads


# --------------------------------------------------------------------------
# direct descent


@dataclass
class DescentResult:
    gbuffer: GBuffer
    loss: float
    initial_loss: float
    history: list = field(default_factory=list)


def _per_pixel_loss(rendered, observed, valid):
    res = rendered - observed
    return np.where(valid, np.mean(res * res, axis=-1), 0.0)


MIN_NDOTV = 1e-3


def _project(g: GBuffer, view: np.ndarray) -> GBuffer:
    """Clamp fields into range and keep normals facing the camera.

    A back-facing pixel renders black with zero gradient, so a descent step
    that crosses the horizon could never recover.
    """
    g = g.project()
    ndotv = np.sum(g.normal * view, axis=-1, keepdims=True)
    n = np.where(ndotv < MIN_NDOTV, g.normal + (MIN_NDOTV - ndotv) * view, g.normal)
    g.normal = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return g


def _step(g: GBuffer, d: GBufferGradients, s: np.ndarray, view: np.ndarray) -> GBuffer:
    s3 = s[..., None]
    moved = GBuffer(
        g.basecolor - s3 * d.basecolor,
        g.normal - s3 * d.normal,
        g.roughness - s * d.roughness,
        g.metallic - s * d.metallic,
        g.depth,
    )
    return _project(moved, view)


def _select(mask: np.ndarray, a: GBuffer, b: GBuffer) -> GBuffer:
    m3 = mask[..., None]
    return GBuffer(
        np.where(m3, a.basecolor, b.basecolor),
        np.where(m3, a.normal, b.normal),
        np.where(mask, a.roughness, b.roughness),
        np.where(mask, a.metallic, b.metallic),
        b.depth,
    )


def _random_like(shape, view: np.ndarray, rng: np.random.Generator) -> GBuffer:
    n = view + 0.5 * rng.standard_normal(tuple(shape) + (3,))
    return _project(
        GBuffer(
            rng.uniform(size=tuple(shape) + (3,)),
            n,
            rng.uniform(0.05, 1.0, shape),
            rng.uniform(size=shape),
        ),
        view,
    )


def optimize_gbuffer(
    init: GBuffer,
    assets: EnvAssets,
    view,
    observed,
    iters: int,
    step: float,
    mask=None,
    *,
    grow: float = 1.5,
    restart_every: int = 50,
    restart_draws: int = 16,
    seed: int = 0,
) -> DescentResult:
    """Projected gradient descent on the measurement loss.

    Pixels are independent, so each keeps its own step size: a pixel whose loss
    would increase rejects the move and halves its step (at most 20 times in a
    row before it is frozen); an accepted move grows the step by ``grow`` up to
    ``step``. ``step`` scales the gradient of the per-pixel loss, which makes it
    independent of image size. Projection clamps every field into its range and
    keeps normals in front of the camera.

    The per-pixel problem is non-convex and can stall against the box
    constraints. Every ``restart_every`` iterations (0 disables), pixels whose
    best loss has not halved since the last check are re-drawn from ``seed``,
    keeping the best of ``restart_draws`` random candidates per pixel. The result is the per-pixel best of ``init`` and all iterates, so
    the reported loss never increases.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    if restart_every < 0 or restart_draws < 1:
        raise ValueError("need restart_every >= 0 and restart_draws >= 1")
    observed = np.asarray(observed, dtype=np.float64)
    valid = _valid_mask(init.shape, mask)
    count = int(valid.sum())
    loss_fn = _residual_loss(observed, valid)
    rng = np.random.default_rng(seed)

    view = np.broadcast_to(np.asarray(view, dtype=np.float64), init.shape + (3,))
    init_pix = _per_pixel_loss(render_forward(init, assets, view), observed, valid)
    initial = float(np.sum(init_pix) / count)
    if not math.isfinite(initial):
        raise FloatingPointError("optimize_gbuffer: non-finite initial loss")
    if step == 0 or initial == 0.0:
        return DescentResult(init.copy(), initial, initial, [initial])
    # Pixels below this are solved and never restarted.
    tol = 1e-12 + 1e-10 * float(np.mean(observed[valid] ** 2))

    g = _project(init, view)
    out, _, grads = render_with_grad(g, assets, view, loss_fn)
    pix_loss = _per_pixel_loss(out.radiance, observed, valid)
    # Projection can make a pixel worse than the (valid) init; start from the better one.
    best_from_init = init_pix <= pix_loss
    best, best_pix = _select(best_from_init, init, g), np.minimum(init_pix, pix_loss)
    checkpoint = best_pix.copy()
    history = [initial]

    # Gradients of the mean loss carry a 1/count factor; undo it per pixel.
    scale = float(count)
    steps = np.where(valid, step, 0.0)
    halvings = np.zeros(init.shape, dtype=np.int64)
    for it in range(iters):
        d = GBufferGradients(
            grads.basecolor * scale, grads.normal * scale, grads.roughness * scale, grads.metallic * scale
        )
        cand = _step(g, d, steps, view)
        out, cand_loss, cand_grads = render_with_grad(cand, assets, view, loss_fn)
        if not math.isfinite(cand_loss):
            raise FloatingPointError(f"optimize_gbuffer: non-finite loss at iteration {it}")
        cand_pix = _per_pixel_loss(out.radiance, observed, valid)
        accept = valid & (steps > 0) & (cand_pix <= pix_loss)
        reject = valid & (steps > 0) & ~accept

        g = _select(accept, cand, g)
        pix_loss = np.where(accept, cand_pix, pix_loss)
        grads = _select_grads(accept, cand_grads, grads)
        halvings = np.where(accept, 0, halvings + reject)
        steps = np.where(accept, np.minimum(steps * grow, step), steps)
        steps = np.where(reject, np.where(halvings > MAX_HALVINGS, 0.0, steps * 0.5), steps)

        improved = pix_loss < best_pix
        best, best_pix = _select(improved, g, best), np.where(improved, pix_loss, best_pix)
        history.append(float(np.sum(best_pix) / count))

        frozen = not np.any(steps > 0)
        if restart_every and it + 1 < iters and ((it + 1) % restart_every == 0 or frozen):
            stalled = valid & (best_pix > tol) & (best_pix > 0.5 * checkpoint)
            checkpoint = best_pix.copy()
            if np.any(stalled):
                # Best of several random draws per pixel.
                fresh_g, fresh_pix = None, None
                for _ in range(restart_draws):
                    cand = _random_like(init.shape, view, rng)
                    cand_pix = _per_pixel_loss(render_forward(cand, assets, view), observed, valid)
                    if fresh_g is None:
                        fresh_g, fresh_pix = cand, cand_pix
                    else:
                        better = cand_pix < fresh_pix
                        fresh_g, fresh_pix = _select(better, cand, fresh_g), np.where(better, cand_pix, fresh_pix)
                g = _select(stalled, fresh_g, g)
                out, _, fresh = render_with_grad(g, assets, view, loss_fn)
                pix_loss = np.where(stalled, _per_pixel_loss(out.radiance, observed, valid), pix_loss)
                grads = _select_grads(stalled, fresh, grads)
                steps = np.where(stalled, step, steps)
                halvings = np.where(stalled, 0, halvings)
                log.debug("optimize_gbuffer: restarted %d pixels at iteration %d", int(stalled.sum()), it + 1)
                continue
        if frozen:
            break
    return DescentResult(best, float(np.sum(best_pix) / count), initial, history)


def _select_grads(mask: np.ndarray, a: GBufferGradients, b: GBufferGradients) -> GBufferGradients:
    m3 = mask[..., None]
    return GBufferGradients(
        np.where(m3, a.basecolor, b.basecolor),
        np.where(m3, a.normal, b.normal),
        np.where(mask, a.roughness, b.roughness),
        np.where(mask, a.metallic, b.metallic),
    )


# --------------------------------------------------------------------------
# diffusion schedule and DDIM


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta schedule with ``K`` evenly spaced inference timesteps."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    K: int = 50

    def __post_init__(self):
        if self.T < 2 or not 1 <= self.K <= self.T:
            raise ValueError("need T >= 2 and 1 <= K <= T")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")

    @property
    def alphas_cumprod(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        return np.cumprod(1.0 - betas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at training step ``t``; ``t = -1`` is the clean end (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[t])

    @property
    def timesteps(self) -> list[int]:
        """Descending inference timesteps, starting at ``T - 1``."""
        ts = np.round(np.linspace(0, self.T - 1, self.K)).astype(int)[::-1]
        return [int(t) for t in ts]

    def pairs(self) -> list[tuple[int, int]]:
        ts = self.timesteps
        return list(zip(ts, ts[1:] + [-1]))

    def describe(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "K": self.K}


def ddim_step(x_t, eps, t_from: int, t_to: int, schedule: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM transition. Returns ``(x0_hat, x_{t_to})``."""
    if not t_from > t_to:
        raise ValueError(f"DDIM steps must go backward in time (got {t_from} -> {t_to})")
    a_from = schedule.alpha_bar(t_from)
    a_to = schedule.alpha_bar(t_to)
    x0 = (x_t - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    x_next = math.sqrt(a_to) * x0 + math.sqrt(1.0 - a_to) * eps
    return x0, x_next


class Denoiser(Protocol):
    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


class GaussianPriorDenoiser:
    """Exact noise predictor for data distributed as ``N(mean, std^2 I)``.

    With ``x_t = sqrt(a) x0 + sqrt(1 - a) eps`` the posterior mean of ``x0`` is
    ``mean + sqrt(a) std^2 / (a std^2 + 1 - a) * (x_t - sqrt(a) mean)``.
    """

    def __init__(self, schedule: DiffusionSchedule, mean=0.0, std: float = 1.0):
        self.schedule = schedule
        self.mean = mean
        self.std = float(std)

    def posterior_mean(self, x_t: np.ndarray, t: int) -> np.ndarray:
        a = self.schedule.alpha_bar(t)
        var = self.std**2
        gain = math.sqrt(a) * var / (a * var + 1.0 - a)
        return self.mean + gain * (x_t - math.sqrt(a) * self.mean)

    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray:
        a = self.schedule.alpha_bar(t)
        if a >= 1.0:
            return np.zeros_like(x_t)
        return (x_t - math.sqrt(a) * self.posterior_mean(x_t, t)) / math.sqrt(1.0 - a)


def ddim_sample(denoiser: Denoiser, schedule: DiffusionSchedule, x_T: np.ndarray) -> np.ndarray:
    """Unguided DDIM; returns the clean estimate of the final step."""
    x = np.array(x_T, dtype=np.float64)
    x0 = x
    for t_from, t_to in schedule.pairs():
        x0, x = ddim_step(x, denoiser(x, t_from), t_from, t_to, schedule)
    return x0


# --------------------------------------------------------------------------
# decoders


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ReferenceDecoder:
    """Latent planes ``(H, W, 8)`` to a G-buffer, with an exact vector-Jacobian product.

    Channels 0-2: basecolor through a logistic; 3-5: normal, offset by
    ``normal_bias`` then normalized; 6: roughness ``clip(0.5 + 0.5 x, 0.01, 1)``;
    7: metallic ``clip(0.5 + 0.5 x, 0, 1)``.
    """

    channels = 8

    def __init__(self, normal_bias=(0.0, 0.0, 2.0)):
        self.normal_bias = np.asarray(normal_bias, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> GBuffer:
        raw = x[..., 3:6] + self.normal_bias
        n = raw / np.maximum(np.linalg.norm(raw, axis=-1, keepdims=True), 1e-12)
        return GBuffer(
            _sigmoid(x[..., 0:3]),
            n,
            np.clip(0.5 + 0.5 * x[..., 6], ROUGHNESS_MIN, 1.0),
            np.clip(0.5 + 0.5 * x[..., 7], 0.0, 1.0),
        )

    def vjp(self, x: np.ndarray, grads: GBufferGradients) -> np.ndarray:
        out = np.zeros_like(x)
        sig = _sigmoid(x[..., 0:3])
        out[..., 0:3] = grads.basecolor * sig * (1.0 - sig)
        raw = x[..., 3:6] + self.normal_bias
        nlen = np.maximum(np.linalg.norm(raw, axis=-1, keepdims=True), 1e-12)
        n = raw / nlen
        dn = grads.normal
        out[..., 3:6] = (dn - n * np.sum(n * dn, axis=-1, keepdims=True)) / nlen
        r = 0.5 + 0.5 * x[..., 6]
        out[..., 6] = 0.5 * grads.roughness * ((r > ROUGHNESS_MIN) & (r < 1.0))
        mt = 0.5 + 0.5 * x[..., 7]
        out[..., 7] = 0.5 * grads.metallic * ((mt > 0.0) & (mt < 1.0))
        return out


class BasecolorDecoder:
    """Affine decoder for basecolor only; geometry and material are fixed.

    ``basecolor = offset + gain * x`` (clamped to ``[0, 1]``) with ``x`` of shape
    ``(H, W, 3)``. With a diffuse-only scene the render is affine in ``x``, so
    the measurement loss is a convex quadratic away from the clamp.
    """

    channels = 3

    def __init__(self, normal, roughness, metallic, gain: float = 0.1, offset: float = 0.5):
        self.normal = np.asarray(normal, dtype=np.float64)
        self.roughness = np.asarray(roughness, dtype=np.float64)
        self.metallic = np.asarray(metallic, dtype=np.float64)
        self.gain = gain
        self.offset = offset

    def __call__(self, x: np.ndarray) -> GBuffer:
        return GBuffer(np.clip(self.offset + self.gain * x, 0.0, 1.0), self.normal, self.roughness, self.metallic)

    def vjp(self, x: np.ndarray, grads: GBufferGradients) -> np.ndarray:
        c = self.offset + self.gain * x
        return self.gain * grads.basecolor * ((c > 0.0) & (c < 1.0))


class Decoder(Protocol):
    channels: int

    def __call__(self, x: np.ndarray) -> GBuffer: ...

    def vjp(self, x: np.ndarray, grads: GBufferGradients) -> np.ndarray: ...


# --------------------------------------------------------------------------
# guided sampling


@dataclass(frozen=True)
class GuidanceConfig:
    zeta: float = 1.0
    clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.zeta >= 0:
            raise ValueError("guidance strength zeta must be >= 0")
        if not self.clip > 0:
            raise ValueError("gradient clip threshold must be > 0")


@dataclass
class StepRecord:
    step: int
    t: int
    loss: float
    grad_norm: float
    zeta: float
    loss_after: float | None = None


@dataclass
class DPSResult:
    gbuffer: GBuffer
    latent: np.ndarray
    final_loss: float
    steps: list
    schedule: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "L_render", "grad_norm", "zeta_t"])
            for r in self.steps:
                w.writerow([r.step, r.t, repr(r.loss), repr(r.grad_norm), repr(r.zeta)])


def initial_latent(shape: tuple[int, int], channels: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(tuple(shape) + (channels,))


def dps_sample(
    denoiser: Denoiser,
    decoder: Decoder,
    assets: EnvAssets,
    view,
    observed,
    cfg: GuidanceConfig,
    schedule: DiffusionSchedule,
    mask=None,
    *,
    x_T: np.ndarray | None = None,
    track_after: bool = False,
    on_step: Callable[[StepRecord], None] | None = None,
) -> DPSResult:
    """DDIM sampling guided by the render measurement loss.

    Each step predicts ``x0_hat``, decodes and renders it, and subtracts
    ``zeta_t * g_t`` from the DDIM successor, where ``g_t`` is the loss gradient
    w.r.t. ``x_t`` (norm-clipped to ``cfg.clip``) and
    ``zeta_t = cfg.zeta / (sqrt(L_render) + 1e-8)``.

    With ``track_after`` each record also carries the loss at the clean estimate
    shifted by the correction, ``x0_hat - zeta_t g_t / sqrt(alpha_bar_{t_to})``.
    """
    observed = np.asarray(observed, dtype=np.float64)
    shape = observed.shape[:2]
    valid = _valid_mask(shape, mask)
    loss_fn = _residual_loss(observed, valid)
    x = initial_latent(shape, decoder.channels, cfg.seed) if x_T is None else np.array(x_T, dtype=np.float64)

    records: list[StepRecord] = []
    x0 = x
    loss = float("nan")
    for i, (t_from, t_to) in enumerate(schedule.pairs()):
        eps = denoiser(x, t_from)
        x0, x_next = ddim_step(x, eps, t_from, t_to, schedule)
        g = decoder(x0)
        _, loss, grads = render_with_grad(g, assets, view, loss_fn)
        grad = decoder.vjp(x0, grads) / math.sqrt(schedule.alpha_bar(t_from))
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(gnorm) and math.isfinite(loss)):
            raise FloatingPointError(f"dps_sample: non-finite guidance at step {i} (t={t_from})")
        if gnorm > cfg.clip:
            grad = grad * (cfg.clip / gnorm)
        zeta_t = cfg.zeta / (math.sqrt(loss) + 1e-8)
        rec = StepRecord(step=i, t=t_from, loss=loss, grad_norm=gnorm, zeta=zeta_t)
        if cfg.zeta != 0.0:
            x_next = x_next - zeta_t * grad
            if track_after:
                shifted = x0 - zeta_t * grad / math.sqrt(schedule.alpha_bar(t_to))
                rec.loss_after = loss_fn(render_forward(decoder(shifted), assets, view))[0]
        elif track_after:
            rec.loss_after = loss
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        log.debug("dps step %d t=%d L=%.6g |g|=%.3g zeta=%.3g", i, t_from, loss, gnorm, zeta_t)
        x = x_next

    return DPSResult(gbuffer=decoder(x0), latent=x0, final_loss=loss, steps=records, schedule=schedule.describe())
