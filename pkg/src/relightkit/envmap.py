"""Equirectangular environment maps and the lighting assets derived from them.

Convention used everywhere in the package: ``+Y`` is up. The polar angle
``theta`` in ``[0, pi]`` is measured from ``+Y`` and runs down the rows; the
azimuth ``phi`` in ``[0, 2 pi)`` is measured from ``+X`` toward ``+Z`` and runs
left to right across the columns. Continuous pixel coordinates ``(u, v)`` put
texel ``(row j, col i)`` centre at ``(i + 0.5, j + 0.5)``.

Derived assets:

* order-2 spherical-harmonics projection, evaluated as cosine-convolved diffuse
  irradiance normalized so that a constant environment ``c`` gives ``c``;
* a roughness mip chain prefiltered with a GGX lobe, sampled trilinearly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import as_linear_image

ASSET_FORMAT_VERSION = 1
PREFILTER_SAMPLES = 256
UNIT_TOL = 1e-6

# Real SH constants for bands 0..2.
_C0 = 0.5 / math.sqrt(math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2 = 0.5 * math.sqrt(15.0 / math.pi)
_C20 = 0.25 * math.sqrt(5.0 / math.pi)
_C22 = 0.25 * math.sqrt(15.0 / math.pi)

#: (l, m) for each of the nine coefficients, in storage order.
SH_INDICES = ((0, 0), (1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2))

# Clamped-cosine convolution factors per band, divided by pi so that a
# constant environment maps to itself.
_BAND_FACTORS = np.array([math.pi, 2 * math.pi / 3, 2 * math.pi / 3, 2 * math.pi / 3] + [math.pi / 4] * 5) / math.pi


def sh_index(l: int, m: int) -> int:
    return SH_INDICES.index((l, m))


def check_envmap(env, *, name: str = "envmap") -> np.ndarray:
    img = as_linear_image(env, name=name)
    h, w = img.shape[:2]
    if w != 2 * h:
        raise ValueError(f"{name}: equirectangular map needs width = 2 * height, got {w}x{h}")
    return img


def _check_unit(d: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must have unit length (tolerance {UNIT_TOL})")


# --------------------------------------------------------------------------
# direction <-> pixel mapping


def dir_to_uv(d, width: int, height: int, *, with_grad: bool = False):
    """Map directions (any length) to continuous pixel coordinates.

    With ``with_grad`` also returns ``du/dd`` and ``dv/dd`` of shape ``(..., 3)``.
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rho2 = x * x + z * z
    rho = np.sqrt(rho2)
    phi = np.mod(np.arctan2(z, x), 2.0 * math.pi)
    theta = np.arctan2(rho, y)
    su = width / (2.0 * math.pi)
    sv = height / math.pi
    u = phi * su
    # arctan2 may land exactly on 2*pi after the modulo for tiny negative z.
    u = np.where(u >= width, u - width, u)
    v = theta * sv
    if not with_grad:
        return u, v
    rho2s = np.maximum(rho2, 1e-24)
    rhos = np.sqrt(rho2s)
    r2 = rho2s + y * y
    zero = np.zeros_like(x)
    du = np.stack([-z / rho2s, zero, x / rho2s], axis=-1) * su
    dv = np.stack([x * y / (rhos * r2), -rhos / r2, z * y / (rhos * r2)], axis=-1) * sv
    return u, v, du, dv


def uv_to_dir(u, v, width: int, height: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = u * (2.0 * math.pi / width)
    theta = v * (math.pi / height)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1)


def equirect_dir_to_pixel(d, width: int, height: int):
    """Unit direction(s) to continuous ``(col, row)`` pixel coordinates."""
    d = np.asarray(d, dtype=np.float64)
    _check_unit(d, "direction")
    return dir_to_uv(d, width, height)


def equirect_pixel_to_dir(u, v, width: int, height: int) -> np.ndarray:
    """Continuous ``(col, row)`` pixel coordinates to unit direction(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u > width) or np.any(v < 0) or np.any(v > height):
        raise ValueError(f"pixel coordinate outside [0, {width}] x [0, {height}]")
    return uv_to_dir(u, v, width, height)


def texel_directions(height: int, width: int) -> np.ndarray:
    """Directions of all texel centres, shape ``(H, W, 3)``."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return uv_to_dir(uu, vv, width, height)


def texel_solid_angles(height: int, width: int) -> np.ndarray:
    """Midpoint-rule solid angle ``(2 pi / W)(pi / H) sin(theta)`` per row, shape ``(H,)``."""
    theta = (np.arange(height) + 0.5) * (math.pi / height)
    return (2.0 * math.pi / width) * (math.pi / height) * np.sin(theta)


# --------------------------------------------------------------------------
# spherical harmonics


def sh_basis(d) -> np.ndarray:
    """Real SH basis, bands 0..2, with ``+Y`` as the polar axis. Shape ``(..., 9)``."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            np.full_like(x, _C0),
            _C1 * z,
            _C1 * y,
            _C1 * x,
            _C2 * x * z,
            _C2 * y * z,
            _C20 * (3.0 * y * y - 1.0),
            _C2 * x * y,
            _C22 * (x * x - z * z),
        ],
        axis=-1,
    )


def sh_basis_grad(d) -> np.ndarray:
    """Gradient of each basis polynomial w.r.t. ``d``, shape ``(..., 9, 3)``."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    c1 = np.full_like(x, _C1)
    rows = [
        (zero, zero, zero),
        (zero, zero, c1),
        (zero, c1, zero),
        (c1, zero, zero),
        (_C2 * z, zero, _C2 * x),
        (zero, _C2 * z, _C2 * y),
        (zero, 6.0 * _C20 * y, zero),
        (_C2 * y, _C2 * x, zero),
        (2.0 * _C22 * x, zero, -2.0 * _C22 * z),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_project(env) -> np.ndarray:
    """Project radiance onto the nine SH basis functions. Returns ``(9, 3)``."""
    img = check_envmap(env)
    h, w = img.shape[:2]
    basis = sh_basis(texel_directions(h, w))  # (H, W, 9)
    weights = texel_solid_angles(h, w)[:, None, None]
    return np.einsum("hwk,hwc->kc", basis * weights, img)


def sh_eval_irradiance(sh, n, *, with_grad: bool = False, check: bool = True):
    """Diffuse irradiance (divided by pi) for normal(s) ``n``. Returns ``(..., 3)``.

    With ``with_grad`` also returns the Jacobian w.r.t. ``n`` of shape ``(..., 3, 3)``
    indexed ``[..., channel, xyz]``.
    """
    sh = np.asarray(sh, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if check:
        _check_unit(n, "normal")
    conv = sh * _BAND_FACTORS[:, None]
    e = sh_basis(n) @ conv
    if not with_grad:
        return e
    jac = np.einsum("...kx,kc->...cx", sh_basis_grad(n), conv)
    return e, jac


# --------------------------------------------------------------------------
# bilinear lookup


def bilinear(img: np.ndarray, u, v, *, with_grad: bool = False):
    """Bilinear lookup at continuous pixel coordinates; wraps in ``u``, clamps in ``v``.

    With ``with_grad`` also returns ``d/du`` and ``d/dv`` of shape ``(..., C)``.
    """
    h, w = img.shape[:2]
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    ix = np.floor(x)
    fx = x - ix
    ix = ix.astype(np.int64)
    i0 = np.mod(ix, w)
    i1 = np.mod(ix + 1, w)

    y_in = (y >= 0.0) & (y <= h - 1)
    yc = np.clip(y, 0.0, h - 1)
    if h > 1:
        j0 = np.minimum(np.floor(yc).astype(np.int64), h - 2)
        j1 = j0 + 1
    else:
        j0 = np.zeros_like(i0)
        j1 = j0
    fy = yc - j0

    a = img[j0, i0]
    b = img[j0, i1]
    c = img[j1, i0]
    d = img[j1, i1]
    fx_ = fx[..., None]
    fy_ = fy[..., None]
    top = a + fx_ * (b - a)
    bot = c + fx_ * (d - c)
    val = top + fy_ * (bot - top)
    if not with_grad:
        return val
    dval_du = (1.0 - fy_) * (b - a) + fy_ * (d - c)
    dval_dv = (bot - top) * y_in[..., None]
    return val, dval_du, dval_dv


def lookup(img: np.ndarray, d, *, with_grad: bool = False):
    """Bilinear radiance lookup along direction(s) ``d``.

    With ``with_grad`` also returns the Jacobian ``(..., C, 3)`` w.r.t. ``d``.
    """
    h, w = img.shape[:2]
    if not with_grad:
        u, v = dir_to_uv(d, w, h)
        return bilinear(img, u, v)
    u, v, du, dv = dir_to_uv(d, w, h, with_grad=True)
    val, gu, gv = bilinear(img, u, v, with_grad=True)
    jac = gu[..., :, None] * du[..., None, :] + gv[..., :, None] * dv[..., None, :]
    return val, jac


# --------------------------------------------------------------------------
# specular prefiltering


def hammersley(n: int) -> np.ndarray:
    """``n`` points of the 2-D Hammersley set (base-2 radical inverse), shape ``(n, 2)``."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << 16) | (bits >> 16)) & 0xFFFFFFFF
    bits = ((bits & 0x55555555) << 1) | ((bits & 0xAAAAAAAA) >> 1)
    bits = ((bits & 0x33333333) << 2) | ((bits & 0xCCCCCCCC) >> 2)
    bits = ((bits & 0x0F0F0F0F) << 4) | ((bits & 0xF0F0F0F0) >> 4)
    bits = ((bits & 0x00FF00FF) << 8) | ((bits & 0xFF00FF00) >> 8)
    radical = bits.astype(np.float64) * 2.3283064365386963e-10
    return np.stack([i / n, radical], axis=-1)


def _tangent_frame(nrm: np.ndarray):
    up = np.zeros_like(nrm)
    polar = np.abs(nrm[..., 1]) > 0.999
    up[..., 1] = np.where(polar, 0.0, 1.0)
    up[..., 0] = np.where(polar, 1.0, 0.0)
    t = np.cross(up, nrm)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(nrm, t)
    return t, b


def source_pyramid(env: np.ndarray) -> list[np.ndarray]:
    """Successive 2x2 reductions of ``env`` weighted by texel solid angle, down to height 1."""
    pyr = [env]
    cur = env
    while cur.shape[0] > 1 and cur.shape[0] % 2 == 0:
        h, w = cur.shape[:2]
        sa = texel_solid_angles(h, w)[:, None, None]
        num = (cur * sa).reshape(h // 2, 2, w // 2, 2, -1).sum(axis=(1, 3))
        den = np.broadcast_to(sa, (h, w, 1)).reshape(h // 2, 2, w // 2, 2, 1).sum(axis=(1, 3))
        cur = num / den
        pyr.append(cur)
    return pyr


def _pyramid_lookup(pyr: list[np.ndarray], d: np.ndarray, lod: np.ndarray) -> np.ndarray:
    lod = np.clip(lod, 0.0, len(pyr) - 1)
    lo = np.minimum(np.floor(lod).astype(np.int64), len(pyr) - 1)
    hi = np.minimum(lo + 1, len(pyr) - 1)
    f = (lod - lo)[..., None]
    out = np.zeros(d.shape[:-1] + (pyr[0].shape[2],))
    for l in np.unique(lo):
        sel = lo == l
        a = lookup(pyr[l], d[sel])
        b = lookup(pyr[hi[sel][0]], d[sel]) if hi[sel][0] != l else a
        out[sel] = a + f[sel] * (b - a)
    return out


def ggx_prefilter(env: np.ndarray, out_height: int, roughness: float, samples: int = PREFILTER_SAMPLES) -> np.ndarray:
    """GGX-lobe filtered copy of ``env`` at resolution ``(out_height, 2 * out_height)``.

    Each output texel averages ``samples`` lookups along reflections of
    GGX-distributed half vectors about the texel direction (``N = V = R``),
    weighted by ``N . L``. ``roughness`` is used directly as the GGX alpha.
    Every lookup reads a solid-angle-weighted reduction of the source chosen so
    one source texel covers about the solid angle the sample represents; this
    keeps small bright features from being skipped between samples.
    """
    pyr = source_pyramid(env)
    h0, w0 = env.shape[:2]
    texel_sa = 4.0 * math.pi / (w0 * h0)

    nrm = texel_directions(out_height, 2 * out_height).reshape(-1, 3)
    t, b = _tangent_frame(nrm)
    xi = hammersley(samples)
    a2 = roughness * roughness
    phi = 2.0 * math.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (a2 - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    hx, hy, hz = sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t

    out = np.zeros((nrm.shape[0], env.shape[2]))
    wsum = np.zeros(nrm.shape[0])
    for k in range(samples):
        # V = N, so N.H = V.H = hz[k], L = 2 (V.H) H - V and pdf(L) = D(H) / 4.
        ndotl = 2.0 * hz[k] * hz[k] - 1.0
        if ndotl <= 0.0:
            continue
        half = hx[k] * t + hy[k] * b + hz[k] * nrm
        light = 2.0 * hz[k] * half - nrm
        denom = hz[k] * hz[k] * (a2 - 1.0) + 1.0
        pdf = a2 / (math.pi * denom * denom) / 4.0
        lod = 0.5 * math.log2(max(1.0 / (samples * pdf * texel_sa), 1.0))
        out += _pyramid_lookup(pyr, light, np.full(nrm.shape[0], lod)) * ndotl
        wsum += ndotl
    if not np.all(wsum > 0):
        raise RuntimeError("prefilter produced texels with no contributing samples")
    return (out / wsum[:, None]).reshape(out_height, 2 * out_height, env.shape[2])


@dataclass(frozen=True)
class PrefilteredEnv:
    levels: tuple  # tuple of (H_l, 2 H_l, 3) arrays, level 0 = source
    roughness: tuple  # roughness assigned to each level

    @property
    def count(self) -> int:
        return len(self.levels)


def prefilter_env(env, levels: int, samples: int = PREFILTER_SAMPLES) -> PrefilteredEnv:
    """Roughness mip chain: level ``l`` has half the previous resolution and roughness ``l / (levels - 1)``."""
    img = check_envmap(env)
    h = img.shape[0]
    if levels < 2:
        raise ValueError("prefiltered environment needs at least 2 levels")
    if h < 2 ** (levels - 1):
        raise ValueError(f"envmap height {h} too small for {levels} levels (needs >= {2 ** (levels - 1)})")
    rough = tuple(l / (levels - 1) for l in range(levels))
    chain = [img.copy()]
    for l in range(1, levels):
        chain.append(ggx_prefilter(img, h >> l, rough[l], samples))
    return PrefilteredEnv(levels=tuple(chain), roughness=rough)


def _level_coords(count: int, roughness):
    """Lower level index and blend fraction; exact breakpoints take the lower segment."""
    level = np.asarray(roughness, dtype=np.float64) * (count - 1)
    lo = np.clip(np.ceil(level) - 1, 0, count - 2).astype(np.int64)
    return lo, level - lo


def sample_specular(pre: PrefilteredEnv, r, roughness, *, with_grad: bool = False, check: bool = True):
    """Trilinear lookup in the mip chain: bilinear per level, linear across levels.

    With ``with_grad`` also returns the Jacobian w.r.t. ``r`` ``(..., 3, 3)`` and
    the derivative w.r.t. roughness ``(..., 3)``. At an exact level breakpoint the
    roughness derivative is the one of the segment below it.
    """
    r = np.asarray(r, dtype=np.float64)
    rough = np.broadcast_to(np.asarray(roughness, dtype=np.float64), r.shape[:-1])
    if check:
        _check_unit(r, "reflection direction")
        if np.any(rough < 0) or np.any(rough > 1):
            raise ValueError("roughness must lie in [0, 1]")
    lo, frac = _level_coords(pre.count, rough)
    channels = pre.levels[0].shape[2]
    val = np.zeros(r.shape[:-1] + (channels,))
    if with_grad:
        jac = np.zeros(r.shape[:-1] + (channels, 3))
        drough = np.zeros(r.shape[:-1] + (channels,))
    for l in np.unique(lo):
        sel = lo == l
        rs = r[sel]
        f = frac[sel][..., None]
        if with_grad:
            a, ja = lookup(pre.levels[l], rs, with_grad=True)
            b, jb = lookup(pre.levels[l + 1], rs, with_grad=True)
            jac[sel] = (1.0 - f[..., None]) * ja + f[..., None] * jb
            drough[sel] = (b - a) * (pre.count - 1)
        else:
            a = lookup(pre.levels[l], rs)
            b = lookup(pre.levels[l + 1], rs)
        val[sel] = (1.0 - f) * a + f * b
    if with_grad:
        return val, jac, drough
    return val


# --------------------------------------------------------------------------
# bundled assets


def content_hash(env) -> str:
    img = np.ascontiguousarray(np.asarray(env, dtype=np.float64))
    h = hashlib.sha256()
    h.update(str(img.shape).encode())
    h.update(img.tobytes())
    return h.hexdigest()


def default_levels(height: int) -> int:
    """Mip count keeping the roughest level at least 16 rows tall (2 levels minimum).

    Coarser levels cannot resolve even the widest GGX lobe well enough for the
    level to preserve the source's solid-angle-weighted energy.
    """
    return max(2, min(6, int(math.log2(height)) - 3))


@dataclass(frozen=True)
class EnvAssets:
    source: np.ndarray
    sh: np.ndarray
    prefiltered: PrefilteredEnv
    source_hash: str
    metadata: dict = field(default_factory=dict)

    def irradiance(self, n, **kw):
        return sh_eval_irradiance(self.sh, n, **kw)

    def specular(self, r, roughness, **kw):
        return sample_specular(self.prefiltered, r, roughness, **kw)


def build_env_assets(env, levels: int | None = None, samples: int = PREFILTER_SAMPLES) -> EnvAssets:
    img = check_envmap(env)
    if levels is None:
        levels = default_levels(img.shape[0])
    pre = prefilter_env(img, levels, samples)
    meta = {
        "format_version": ASSET_FORMAT_VERSION,
        "sh_order": 2,
        "levels": levels,
        "level_roughness": list(pre.roughness),
        "prefilter_samples": samples,
        "sequence": "hammersley-base2",
        "ggx_alpha": "roughness",
    }
    return EnvAssets(source=img, sh=sh_project(img), prefiltered=pre, source_hash=content_hash(img), metadata=meta)


def save_assets(assets: EnvAssets, path) -> None:
    """Write assets to an ``.npz`` sidecar; the metadata records format version and source hash."""
    arrays = {"source": assets.source, "sh": assets.sh}
    for i, lvl in enumerate(assets.prefiltered.levels):
        arrays[f"level_{i}"] = lvl
    meta = dict(assets.metadata, source_hash=assets.source_hash)
    arrays["metadata"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_assets(path, expected_hash: str | None = None) -> EnvAssets:
    with np.load(path) as data:
        meta = json.loads(bytes(data["metadata"]).decode())
        if meta.get("format_version") != ASSET_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported asset format {meta.get('format_version')}")
        if expected_hash is not None and meta["source_hash"] != expected_hash:
            raise ValueError(f"{path}: cached assets belong to a different envmap")
        levels = tuple(data[f"level_{i}"] for i in range(meta["levels"]))
        source, sh = data["source"], data["sh"]
    source_hash = meta.pop("source_hash")
    pre = PrefilteredEnv(levels=levels, roughness=tuple(meta["level_roughness"]))
    return EnvAssets(source=source, sh=sh, prefiltered=pre, source_hash=source_hash, metadata=meta)


def cached_env_assets(env, cache_dir, levels: int | None = None) -> EnvAssets:
    """Build assets for ``env`` or reuse a sidecar in ``cache_dir`` keyed by content hash."""
    img = check_envmap(env)
    if levels is None:
        levels = default_levels(img.shape[0])
    key = content_hash(img)
    cache_dir = Path(cache_dir)
    path = cache_dir / f"envassets-v{ASSET_FORMAT_VERSION}-{key[:32]}-L{levels}.npz"
    if path.is_file():
        return load_assets(path, expected_hash=key)
    assets = build_env_assets(img, levels)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_assets(assets, tmp)
    tmp.replace(path)
    return assets
