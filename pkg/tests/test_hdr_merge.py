import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relightkit.hdr_merge import ExposureFrame, merge_exposures, triangle_weight


def const_frame(z, dt, shape=(1, 1)):
    return ExposureFrame(np.full(shape + (3,), z), dt)


def test_triangle_weight_values():
    assert triangle_weight(0.5) == 1.0
    assert triangle_weight(0.0) == 0.0
    assert triangle_weight(1.0) == 0.0
    assert triangle_weight(0.25) == 0.5


@given(st.floats(0.0, 1.0))
def test_triangle_weight_symmetric(z):
    assert triangle_weight(z) == pytest.approx(triangle_weight(1.0 - z), abs=1e-15)
    assert 0.0 <= triangle_weight(z) <= 1.0


@pytest.mark.parametrize("z", [-0.01, 1.01, float("nan")])
def test_triangle_weight_rejects_out_of_range(z):
    with pytest.raises(ValueError):
        triangle_weight(z)


def test_single_frame():
    res = merge_exposures([const_frame(0.5, 2.0, (3, 4))])
    assert np.array_equal(res.radiance, np.full((3, 4, 3), 0.25))
    assert not res.saturated.any()


def test_saturated_frame_dropped():
    res = merge_exposures([const_frame(1.0, 1.0), const_frame(0.5, 1.0)])
    assert res.radiance[0, 0, 0] == 0.5


def test_three_frame_hand_value():
    # L_i = 0.4, 0.5, 0.45 ; w = 0.4, 1.0, 0.2 ; L = 0.75 / 1.6
    frames = [const_frame(0.2, 0.5), const_frame(0.5, 1.0), const_frame(0.9, 2.0)]
    res = merge_exposures(frames)
    assert res.radiance[0, 0, 0] == pytest.approx(0.46875, abs=1e-15)


def test_all_saturated_falls_back_to_shortest_exposure():
    frames = [const_frame(1.0, 0.5), const_frame(1.0, 0.25), const_frame(1.0, 1.0)]
    res = merge_exposures(frames)
    assert res.radiance[0, 0, 0] == 4.0
    assert res.saturated.all()


def test_channels_saturate_independently():
    z = np.array([[[1.0, 0.5, 0.25]]])
    res = merge_exposures([ExposureFrame(z, 1.0), ExposureFrame(z * 0.5, 0.5)])
    # red is clipped in the long frame and sits at 0.5 in the short one
    assert res.radiance[0, 0].tolist() == pytest.approx([1.0, 0.5, 0.25])
    assert not res.saturated.any()


def test_errors():
    with pytest.raises(ValueError):
        merge_exposures([])
    with pytest.raises(ValueError):
        merge_exposures([const_frame(0.5, 1.0, (2, 2)), const_frame(0.5, 1.0, (2, 3))])
    with pytest.raises(ValueError):
        ExposureFrame(np.full((1, 1, 3), 1.5), 1.0)
    with pytest.raises(ValueError):
        ExposureFrame(np.full((1, 1, 3), 0.5), 0.0)


def simulate_stack(radiance, times):
    return [ExposureFrame(np.clip(radiance * t, 0.0, 1.0), t) for t in times]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance_bitwise(seed):
    rng = np.random.default_rng(seed)
    radiance = 10.0 ** rng.uniform(-2, 2, size=(8, 8, 3))
    frames = simulate_stack(radiance, [0.01, 0.1, 1.0, 0.1])
    ref = merge_exposures(frames).radiance
    perm = rng.permutation(len(frames))
    assert np.array_equal(merge_exposures([frames[i] for i in perm]).radiance, ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_exposure_scale_covariance(seed, k):
    rng = np.random.default_rng(seed)
    frames = [ExposureFrame(rng.uniform(0, 1, (6, 6, 3)), t) for t in (0.02, 0.3, 1.5)]
    base = merge_exposures(frames).radiance
    scaled = merge_exposures([ExposureFrame(f.pixels, f.exposure_time * k) for f in frames]).radiance
    assert np.max(np.abs(scaled * k - base) / base) <= 1e-12


def test_consistent_stack_recovers_radiance():
    rng = np.random.default_rng(3)
    radiance = 10.0 ** rng.uniform(-1.5, 2.5, size=(32, 32, 3))
    times = [0.005, 0.05, 0.5]
    res = merge_exposures(simulate_stack(radiance, times))
    z = np.stack([np.clip(radiance * t, 0, 1) for t in times])
    ok = np.any((z > 0) & (z < 1), axis=0)
    assert ok.mean() > 0.9
    rel = np.abs(res.radiance - radiance) / radiance
    assert rel[ok].max() <= 1e-3
    assert np.all(np.isfinite(res.radiance)) and np.all(res.radiance >= 0)
