"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from relightkit.envmap import build_env_assets, sh_eval_irradiance, sh_project, texel_directions, texel_solid_angles
from relightkit.evaluation import align_scale, evaluate_relight, leave_one_out_folds, psnr
from relightkit.hdr_merge import ExposureFrame, merge_exposures
from relightkit.imaging import tone_map_for_metrics
from relightkit.inverse import (
    DiffusionSchedule,
    GaussianPriorDenoiser,
    GuidanceConfig,
    ReferenceDecoder,
    ddim_sample,
    dps_sample,
    initial_latent,
    optimize_gbuffer,
)
from relightkit.renderer import GBuffer, render_forward
from relightkit.sync import solar_displacement

from conftest import fd_gradient_pairs, random_gbuffer, smooth_envmap


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        assert ok, detail

    return emit


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_criterion_1_solar_sync(report):
    t0 = time.perf_counter()
    theta_mean, _ = solar_displacement(40.14, 256)
    theta_max, shift = solar_displacement(114.0, 256)
    elapsed = time.perf_counter() - t0
    ok = (
        abs(theta_mean - 0.167) <= 0.005
        and abs(theta_max - 0.475) <= 0.005
        and abs(shift - 0.34) <= 0.02
        and elapsed < 1.0
    )
    report(
        1, "solar synchronization", ok,
        f"theta(40.14s)={theta_mean:.4f} deg, theta(114s)={theta_max:.4f} deg, shift@256={shift:.4f} px, {elapsed:.3f}s",
    )


def test_criterion_2_hdr_merge(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    radiance = np.exp(rng.uniform(np.log(0.05), np.log(200.0), (256, 256, 3)))
    times = [1 / 64, 1 / 8, 1.0]
    raw = [radiance * dt for dt in times]
    frames = [ExposureFrame(np.clip(z, 0.0, 1.0), dt) for z, dt in zip(raw, times)]
    res = merge_exposures(frames)
    usable = np.zeros(radiance.shape, bool)
    for z in raw:
        usable |= (z > 0.0) & (z < 1.0)
    rel = np.abs(res.radiance - radiance) / radiance
    worst = float(rel[usable].max())

    perm = merge_exposures([frames[2], frames[0], frames[1]])
    perm_ok = perm.radiance.tobytes() == res.radiance.tobytes() and np.array_equal(perm.saturated, res.saturated)
    scale_ok = True
    for k in (0.5, 4.0):
        scaled = merge_exposures([ExposureFrame(f.pixels, f.exposure_time * k) for f in frames])
        scale_ok &= scaled.radiance.tobytes() == (res.radiance / k).tobytes()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and perm_ok and scale_ok and elapsed < 5.0
    report(
        2, "HDR merge fidelity", ok,
        f"max rel err {worst:.2e} on {int(usable.sum())} channel samples, permutation exact={perm_ok}, "
        f"exposure-scale exact={scale_ok}, {elapsed:.2f}s",
    )


def test_criterion_3_furnace(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    c = 1.7
    assets = build_env_assets(np.full((64, 128, 3), c))
    # 100 random (n, v, alpha) triples, plus a full 64x64 frame with per-pixel views.
    worst = 0.0
    for shape in ((10, 10), (64, 64)):
        v = unit(rng.normal(size=shape + (3,)))
        n = unit(v + rng.normal(size=shape + (3,)) * 0.6)
        flip = np.sum(n * v, axis=-1) <= 0.01
        n[flip] = v[flip]
        g = GBuffer(np.ones(shape + (3,)), n, rng.uniform(0.01, 1.0, shape), np.zeros(shape))
        worst = max(worst, float(np.max(np.abs(render_forward(g, assets, v) / c - 1.0))))
    zero = build_env_assets(np.zeros((64, 128, 3)))
    g = random_gbuffer(rng, 64, 64)
    zero_ok = not np.any(render_forward(g, zero, (0.0, 0.0, 1.0)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.01 and zero_ok and elapsed < 10.0
    report(3, "renderer furnace", ok, f"max rel dev {worst:.2e}, zero env exactly 0={zero_ok}, {elapsed:.2f}s")


def test_criterion_4_gradients(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    assets = build_env_assets(smooth_envmap(rng, 64))
    g = random_gbuffer(rng, 32, 32, rough=(0.05, 0.95))
    passed, checked, skipped = fd_gradient_pairs(g, assets, (0.0, 0.0, 1.0), 1000, rng, eps=1e-4, rtol=1e-3)
    elapsed = time.perf_counter() - t0
    frac = passed / checked
    ok = frac >= 0.99 and checked >= 900 and elapsed < 60.0
    report(
        4, "gradient correctness", ok,
        f"{passed}/{checked} pairs within 1e-3 ({100 * frac:.1f}%), {skipped} skipped at kinks, {elapsed:.1f}s",
    )


def test_criterion_5_inverse_self_consistency(report):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    assets = build_env_assets(smooth_envmap(rng, 64))
    view = (0.0, 0.0, 1.0)
    gt = random_gbuffer(rng, 64, 64, spread=0.4, min_ndotv=0.05)
    observed = render_forward(gt, assets, view)
    init = random_gbuffer(np.random.default_rng(55), 64, 64, spread=0.4)
    res = optimize_gbuffer(init, assets, view, observed, iters=500, step=1.0)
    recon = render_forward(res.gbuffer, assets, view)
    value = psnr(tone_map_for_metrics(recon), tone_map_for_metrics(observed))
    elapsed = time.perf_counter() - t0
    ok = value > 40.0 and elapsed < 60.0
    report(5, "inverse self-consistency", ok, f"PSNR {value:.2f} dB after 500 iterations, {elapsed:.1f}s")


def test_criterion_6_dps_efficacy(report):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    assets = build_env_assets(smooth_envmap(rng, 32))
    view = (0.0, 0.0, 1.0)
    schedule = DiffusionSchedule()
    den = GaussianPriorDenoiser(schedule, 0.0, 1.0)
    dec = ReferenceDecoder()
    observed = render_forward(dec(initial_latent((16, 16), 8, 12345)), assets, view)
    wins = 0
    for seed in range(100):
        guided = dps_sample(den, dec, assets, view, observed, GuidanceConfig(zeta=1.0, seed=seed), schedule)
        plain = dps_sample(den, dec, assets, view, observed, GuidanceConfig(zeta=0.0, seed=seed), schedule)
        wins += guided.final_loss < plain.final_loss
    plain = dps_sample(den, dec, assets, view, observed, GuidanceConfig(zeta=0.0, seed=7), schedule)
    exact = plain.latent.tobytes() == ddim_sample(den, schedule, initial_latent((16, 16), 8, 7)).tobytes()
    elapsed = time.perf_counter() - t0
    ok = wins >= 95 and exact
    report(6, "DPS efficacy", ok, f"guided < unguided on {wins}/100 seeds, zeta=0 bit-exact={exact}, {elapsed:.1f}s")


def test_criterion_7_evaluation(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    grid = np.geomspace(1e-3, 1e3, 100_001)
    step = grid[1] / grid[0]
    grid_ok = 0
    for _ in range(100):
        p = rng.uniform(0, 2, (16, 16, 3))
        g = p * math.exp(rng.uniform(-4, 4)) + rng.normal(0, 0.05, p.shape)
        a = align_scale(p, g).alpha
        spp, spg, sgg = np.sum(p * p), np.sum(p * g), np.sum(g * g)
        best = grid[np.argmin(grid**2 * spp - 2 * grid * spg + sgg)]
        grid_ok += best / step <= a <= best * step

    p, g = rng.uniform(0, 3, (32, 32, 3)), rng.uniform(0, 3, (32, 32, 3))
    base = evaluate_relight(p, g)
    invariant = all(
        (r.psnr, r.ssim) == (base.psnr, base.ssim) for r in (evaluate_relight(k * p, g) for k in (2.0**-10, 0.5, 8.0))
    )
    same = evaluate_relight(p, p)
    half = psnr(np.full((16, 16, 3), 0.5), np.full((16, 16, 3), 0.6))
    elapsed = time.perf_counter() - t0
    ok = grid_ok == 100 and invariant and same.psnr == 100.0 and same.ssim == 1.0 and abs(half - 20.0) <= 0.01
    ok = ok and elapsed < 10.0
    report(
        7, "evaluation protocol", ok,
        f"alpha within grid resolution {grid_ok}/100, scale invariance exact={invariant}, identical -> "
        f"PSNR {same.psnr:.0f} SSIM {same.ssim:.6f}, 0.5 vs 0.6 -> {half:.4f} dB, {elapsed:.2f}s",
    )


def test_criterion_8_sh_irradiance(report):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    h, w = 32, 64
    dirs = texel_directions(h, w)
    sa = texel_solid_angles(h, w)[:, None]
    worst = 0.0
    for i in range(10):
        env = rng.uniform(0, 1, (h, w, 3))
        n = unit(rng.normal(size=(50, 3)))
        cos = np.clip(np.einsum("hwx,nx->nhw", dirs, n), 0, None)
        brute = np.einsum("nhw,hwc->nc", cos * sa, env) / math.pi
        approx = sh_eval_irradiance(sh_project(env), n)
        worst = max(worst, float(np.max(np.abs(approx - brute) / brute)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and elapsed < 30.0
    report(8, "SH irradiance", ok, f"max rel err {100 * worst:.3f}% over 10 maps x 50 normals, {elapsed:.2f}s")


def test_criterion_9_folds(report):
    details, ok = [], True
    for n in (2, 5, 7):
        ids = [f"light{i}" for i in range(n)]
        folds = leave_one_out_folds(ids)
        held = [f.held_out for f in folds]
        good = len(folds) == n and len(set(held)) == n and set(held) == set(ids)
        good = good and all(f.held_out not in f.support and len(f.support) == n - 1 for f in folds)
        ok &= good
        details.append(f"N={n}: {len(folds)} folds")
    report(9, "fold protocol", ok, ", ".join(details))
