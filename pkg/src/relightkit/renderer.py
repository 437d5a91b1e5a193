"""Per-pixel split-sum Cook-Torrance shading under image-based lighting.

Forward model for each pixel::

    F0     = lerp(0.04, basecolor, metallic)
    F      = F0 + (1 - F0) (1 - n.v)^5
    L_diff = (1 - metallic) (1 - F) basecolor E_diff(n)
    L_spec = F E_spec(r, roughness),     r = 2 (n.v) n - v
    L_o    = max(L_diff + L_spec, 0)

``E_diff`` comes from the SH irradiance and ``E_spec`` from the prefiltered
mip chain of :class:`relightkit.envmap.EnvAssets`. Pixels with ``n.v <= 0``
render black and receive zero gradient.

:func:`render_backward` is the exact adjoint of :func:`render_forward`. Normal
gradients are taken w.r.t. the vector *before* renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envmap import EnvAssets

DIELECTRIC_F0 = 0.04
ROUGHNESS_MIN = 0.01
NORMAL_TOL = 1e-4


@dataclass
class GBuffer:
    """Per-pixel surface description.

    ``basecolor`` and ``normal`` are ``(H, W, 3)``; ``roughness`` and ``metallic``
    are ``(H, W)``. ``depth`` is carried along for I/O and never used in shading.
    """

    basecolor: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.basecolor = np.asarray(self.basecolor, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        self.metallic = np.asarray(self.metallic, dtype=np.float64)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.shape
        if self.basecolor.shape != (h, w, 3) or self.normal.shape != (h, w, 3):
            raise ValueError("basecolor and normal must be (H, W, 3)")
        if self.roughness.shape != (h, w) or self.metallic.shape != (h, w):
            raise ValueError("roughness and metallic must be (H, W)")
        if self.depth is not None and self.depth.shape != (h, w):
            raise ValueError("depth must be (H, W)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.basecolor.shape[:2]

    def validate(self, *, unit_normals: bool = True) -> "GBuffer":
        fields = [self.basecolor, self.normal, self.roughness, self.metallic]
        if not all(np.all(np.isfinite(f)) for f in fields):
            raise ValueError("G-buffer contains non-finite values")
        if self.basecolor.min() < 0 or self.basecolor.max() > 1:
            raise ValueError("basecolor outside [0, 1]")
        if self.metallic.min() < 0 or self.metallic.max() > 1:
            raise ValueError("metallic outside [0, 1]")
        if self.roughness.min() < ROUGHNESS_MIN or self.roughness.max() > 1:
            raise ValueError(f"roughness outside [{ROUGHNESS_MIN}, 1]")
        norms = np.linalg.norm(self.normal, axis=-1)
        if unit_normals and np.any(np.abs(norms - 1.0) > NORMAL_TOL):
            raise ValueError("normals must have unit length")
        if np.any(norms == 0):
            raise ValueError("zero-length normal")
        return self

    def copy(self) -> "GBuffer":
        return GBuffer(
            self.basecolor.copy(),
            self.normal.copy(),
            self.roughness.copy(),
            self.metallic.copy(),
            None if self.depth is None else self.depth.copy(),
        )

    def project(self) -> "GBuffer":
        """Clamp every field into its valid range and renormalize normals."""
        n = self.normal / np.maximum(np.linalg.norm(self.normal, axis=-1, keepdims=True), 1e-12)
        return GBuffer(
            np.clip(self.basecolor, 0.0, 1.0),
            n,
            np.clip(self.roughness, ROUGHNESS_MIN, 1.0),
            np.clip(self.metallic, 0.0, 1.0),
            self.depth,
        )


@dataclass
class GBufferGradients:
    basecolor: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def norm(self) -> float:
        return float(
            np.sqrt(sum(np.sum(g * g) for g in (self.basecolor, self.normal, self.roughness, self.metallic)))
        )


@dataclass
class RenderResult:
    radiance: np.ndarray  # clamped L_o
    diffuse: np.ndarray  # L_diff before the clamp
    specular: np.ndarray  # L_spec before the clamp
    front: np.ndarray  # (H, W) bool, n.v > 0


def directional_view(shape: tuple[int, int], direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """A single shared view direction (toward the camera) for every pixel."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return np.broadcast_to(d, tuple(shape) + (3,)).copy()


def pinhole_view(shape: tuple[int, int], focal: float, principal=None) -> np.ndarray:
    """Per-pixel directions toward a pinhole camera at the origin looking down ``-Z``.

    Image rows grow downward (``-Y``); pixel centres sit at half-integers.
    """
    h, w = shape
    cx, cy = (w / 2.0, h / 2.0) if principal is None else principal
    xs = (np.arange(w) + 0.5 - cx) / focal
    ys = (np.arange(h) + 0.5 - cy) / focal
    xx, yy = np.meshgrid(xs, ys)
    ray = np.stack([xx, -yy, -np.ones_like(xx)], axis=-1)
    ray /= np.linalg.norm(ray, axis=-1, keepdims=True)
    return -ray


def fresnel_schlick(ndotv, f0):
    """Schlick Fresnel ``F0 + (1 - F0)(1 - n.v)^5``."""
    ndotv = np.asarray(ndotv, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(ndotv < 0) or np.any(ndotv > 1):
        raise ValueError("n.v must lie in [0, 1]")
    if np.any(f0 < 0) or np.any(f0 > 1):
        raise ValueError("F0 must lie in [0, 1]")
    s = (1.0 - ndotv) ** 5
    return f0 + (1.0 - f0) * s[..., None] if f0.ndim > ndotv.ndim else f0 + (1.0 - f0) * s


def base_reflectance(basecolor, metallic):
    """``F0 = lerp(0.04, basecolor, metallic)``."""
    m = np.asarray(metallic, dtype=np.float64)[..., None]
    return DIELECTRIC_F0 * (1.0 - m) + np.asarray(basecolor, dtype=np.float64) * m


def reflect(n, v):
    """Mirror ``v`` about ``n``: ``2 (n.v) n - v``. Requires ``n.v > 0``."""
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ndotv = np.sum(n * v, axis=-1, keepdims=True)
    if np.any(ndotv <= 0):
        raise ValueError("reflect: back-facing configuration (n.v <= 0)")
    return 2.0 * ndotv * n - v


def _prepare(g: GBuffer, view) -> tuple[np.ndarray, np.ndarray]:
    v = np.broadcast_to(np.asarray(view, dtype=np.float64), g.shape + (3,))
    if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > NORMAL_TOL):
        raise ValueError("view directions must have unit length")
    g.validate(unit_normals=False)
    return v, np.linalg.norm(g.normal, axis=-1, keepdims=True)


def _shade(g: GBuffer, assets: EnvAssets, view, with_grad: bool):
    v, nlen = _prepare(g, view)
    n = g.normal / nlen
    cb = g.basecolor
    m = g.metallic[..., None]
    ndotv_raw = np.sum(n * v, axis=-1)
    front = ndotv_raw > 0.0
    ndotv = np.clip(ndotv_raw, 0.0, 1.0)
    one_minus = 1.0 - ndotv
    s = one_minus**5
    f0 = DIELECTRIC_F0 * (1.0 - m) + cb * m
    fres = f0 + (1.0 - f0) * s[..., None]

    # Back-facing pixels still need a valid lookup direction; their output is zeroed.
    n_safe = np.where(front[..., None], n, v)
    r = 2.0 * np.where(front, ndotv, 1.0)[..., None] * n_safe - v
    rough = g.roughness
    if with_grad:
        ed, ed_jac = assets.irradiance(n, with_grad=True, check=False)
        es, es_jac, es_drough = assets.specular(r, rough, with_grad=True, check=False)
    else:
        ed = assets.irradiance(n, check=False)
        es = assets.specular(r, rough, check=False)

    diffuse = (1.0 - m) * (1.0 - fres) * cb * ed
    specular = fres * es
    frontf = front[..., None]
    diffuse = np.where(frontf, diffuse, 0.0)
    specular = np.where(frontf, specular, 0.0)
    total = diffuse + specular
    out = RenderResult(radiance=np.maximum(total, 0.0), diffuse=diffuse, specular=specular, front=front)
    if not with_grad:
        return out, None
    cache = dict(
        v=v, nlen=nlen, n=n, cb=cb, m=m, ndotv=ndotv, one_minus=one_minus, s=s, f0=f0, fres=fres,
        ed=ed, ed_jac=ed_jac, es=es, es_jac=es_jac, es_drough=es_drough, total=total,
    )
    return out, cache


def render(g: GBuffer, assets: EnvAssets, view) -> RenderResult:
    """Render with the diffuse/specular split exposed."""
    return _shade(g, assets, view, with_grad=False)[0]


def render_forward(g: GBuffer, assets: EnvAssets, view) -> np.ndarray:
    """Render the clamped outgoing radiance ``(H, W, 3)``."""
    return render(g, assets, view).radiance


def render_backward(g: GBuffer, assets: EnvAssets, view, loss_grad) -> GBufferGradients:
    """Vector-Jacobian product of :func:`render_forward` with ``loss_grad`` ``(H, W, 3)``."""
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != g.shape + (3,):
        raise ValueError(f"loss_grad must have shape {g.shape + (3,)}, got {loss_grad.shape}")
    if not np.all(np.isfinite(loss_grad)):
        raise ValueError("loss_grad contains non-finite values")
    out, c = _shade(g, assets, view, with_grad=True)
    return _backward(c, out.front, loss_grad)


def render_with_grad(g: GBuffer, assets: EnvAssets, view, loss_fn):
    """Render once, evaluate ``loss_fn(radiance) -> (loss, dloss/dradiance)`` and backpropagate."""
    out, c = _shade(g, assets, view, with_grad=True)
    loss, dl = loss_fn(out.radiance)
    return out, loss, _backward(c, out.front, dl)


def _backward(c: dict, front: np.ndarray, loss_grad: np.ndarray) -> GBufferGradients:
    # Subgradient 0 on the clamped branch and on back-facing pixels.
    g = loss_grad * ((c["total"] > 0.0) & front[..., None])
    cb, m, fres, ed, es = c["cb"], c["m"], c["fres"], c["ed"], c["es"]
    one_m = 1.0 - m

    # L_diff = (1 - m)(1 - F) cb Ed
    d_cb = g * one_m * (1.0 - fres) * ed
    d_f = -g * one_m * cb * ed
    d_m = -np.sum(g * (1.0 - fres) * cb * ed, axis=-1)
    d_ed = g * one_m * (1.0 - fres) * cb
    # L_spec = F Es
    d_f = d_f + g * es
    d_es = g * fres
    # F = F0 + (1 - F0) s
    s = c["s"][..., None]
    d_f0 = d_f * (1.0 - s)
    d_s = np.sum(d_f * (1.0 - c["f0"]), axis=-1)
    # F0 = 0.04 (1 - m) + cb m
    d_m = d_m + np.sum(d_f0 * (cb - DIELECTRIC_F0), axis=-1)
    d_cb = d_cb + d_f0 * m
    # s = (1 - n.v)^5
    d_ndotv = d_s * (-5.0) * c["one_minus"] ** 4
    # Ed(n), Es(r, roughness)
    d_n = np.einsum("...c,...cx->...x", d_ed, c["ed_jac"])
    d_r = np.einsum("...c,...cx->...x", d_es, c["es_jac"])
    d_rough = np.sum(d_es * c["es_drough"], axis=-1)
    # r = 2 (n.v) n - v
    n, v, ndotv = c["n"], c["v"], c["ndotv"]
    d_n = d_n + 2.0 * ndotv[..., None] * d_r
    d_ndotv = d_ndotv + 2.0 * np.sum(n * d_r, axis=-1)
    # n.v
    d_n = d_n + d_ndotv[..., None] * v
    # n = raw / |raw|
    d_raw = (d_n - n * np.sum(n * d_n, axis=-1, keepdims=True)) / c["nlen"]

    mask = front[..., None]
    return GBufferGradients(
        basecolor=np.where(mask, d_cb, 0.0),
        normal=np.where(mask, d_raw, 0.0),
        roughness=np.where(front, d_rough, 0.0),
        metallic=np.where(front, d_m, 0.0),
    )


GBUFFER_FILES = ("basecolor.exr", "normal.exr", "roughness.exr", "metallic.exr")


def write_gbuffer(directory, g: GBuffer) -> None:
    """Store a G-buffer as EXRs; normals are remapped from ``[-1, 1]`` to ``[0, 1]``."""
    from .imaging import write_exr, write_exr_scalar

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_exr(d / "basecolor.exr", g.basecolor)
    write_exr(d / "normal.exr", np.clip(0.5 * (g.normal + 1.0), 0.0, 1.0))
    write_exr_scalar(d / "roughness.exr", g.roughness)
    write_exr_scalar(d / "metallic.exr", g.metallic)
    if g.depth is not None:
        write_exr_scalar(d / "depth.exr", g.depth)


def read_gbuffer(directory) -> GBuffer:
    from .imaging import read_exr, read_exr_scalar

    d = Path(directory)
    for name in GBUFFER_FILES:
        if not (d / name).is_file():
            raise FileNotFoundError(f"G-buffer directory {d} is missing {name}")
    n = 2.0 * read_exr(d / "normal.exr") - 1.0
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    depth = read_exr_scalar(d / "depth.exr") if (d / "depth.exr").is_file() else None
    g = GBuffer(
        np.clip(read_exr(d / "basecolor.exr"), 0.0, 1.0),
        n,
        np.clip(read_exr_scalar(d / "roughness.exr"), ROUGHNESS_MIN, 1.0),
        np.clip(read_exr_scalar(d / "metallic.exr"), 0.0, 1.0),
        depth,
    )
    return g.validate()
