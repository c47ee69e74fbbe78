import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ged.errors import DomainError, OrderingError, ShapeError
from ged.schedule import (
    NoiseSchedule,
    ddim_step,
    ddim_update,
    diffuse_at,
    estimate_x0,
    forward_diffuse,
    noise_loss,
    sampling_times,
    signal_rates,
    x0_from_noise,
)

COSINE = NoiseSchedule()
LINEAR = NoiseSchedule(form="linear")


@pytest.mark.parametrize("schedule", [COSINE, LINEAR])
def test_endpoints(schedule):
    s0, n0 = signal_rates(schedule, 0.0)
    s1, n1 = signal_rates(schedule, 1.0)
    assert s0 == pytest.approx(schedule.max_signal_rate, abs=1e-15)
    assert n0 == pytest.approx(math.sqrt(1 - schedule.max_signal_rate**2), abs=1e-15)
    assert s1 == pytest.approx(schedule.min_signal_rate, abs=1e-15)
    assert n1 == pytest.approx(math.sqrt(1 - schedule.min_signal_rate**2), abs=1e-15)


def test_cosine_midpoint_matches_angle_formula():
    # direct evaluation: cos((acos(0.95) + acos(0.02)) / 2)
    expected = math.cos((math.acos(0.95) + math.acos(0.02)) / 2)
    assert expected == pytest.approx(0.594480, abs=1e-6)
    signal, noise = signal_rates(COSINE, 0.5)
    assert signal == pytest.approx(expected, abs=1e-14)
    assert noise == pytest.approx(math.sqrt(1 - expected**2), abs=1e-14)


@pytest.mark.parametrize("schedule", [COSINE, LINEAR])
def test_rates_on_grid(schedule):
    t = np.linspace(0, 1, 100)
    signal, noise = signal_rates(schedule, t)
    np.testing.assert_allclose(signal**2 + noise**2, 1.0, atol=1e-12, rtol=0)
    assert np.all(np.diff(signal) < 0)
    assert np.all(np.diff(noise) > 0)


def test_rates_accept_torch():
    t = torch.linspace(0, 1, 7, dtype=torch.float64)
    s, n = signal_rates(COSINE, t)
    assert isinstance(s, torch.Tensor)
    np.testing.assert_allclose((s**2 + n**2).numpy(), 1.0, atol=1e-12)


@pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan")])
def test_time_out_of_range(bad):
    with pytest.raises(DomainError):
        signal_rates(COSINE, bad)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.9), (0.5, 0.4), (0.1, 1.0)])
def test_invalid_schedule(lo, hi):
    with pytest.raises(DomainError):
        NoiseSchedule(lo, hi)


def test_forward_diffuse_limits():
    x0 = np.array([1.0, -2.0, 3.0])
    eps = np.array([0.3, 0.1, -0.7])
    np.testing.assert_array_equal(diffuse_at(x0, eps, 1.0), x0)
    np.testing.assert_array_equal(diffuse_at(x0, eps, 0.0), eps)


def test_forward_diffuse_scalar_example():
    # 0.5 * 2.0 + sqrt(0.75) * 1.0
    out = diffuse_at(np.array([2.0]), np.array([1.0]), 0.25)
    assert out[0] == pytest.approx(1.0 + math.sqrt(0.75), abs=1e-12)
    assert out[0] == pytest.approx(1.8660, abs=1e-4)


def test_forward_diffuse_matches_time_api():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 4, 4, 3))
    t = 0.37
    alpha = COSINE.alpha(t)
    np.testing.assert_allclose(forward_diffuse(x0, eps, t, COSINE), diffuse_at(x0, eps, alpha), atol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_diffuse(np.zeros((2, 2)), np.zeros((2, 3)), 0.5, COSINE)
    with pytest.raises(ShapeError):
        estimate_x0(np.zeros((2, 2)), np.zeros(3), 0.5, COSINE)
    with pytest.raises(ShapeError):
        noise_loss(np.zeros(2), np.zeros(3))


def test_estimate_x0_examples():
    c = np.full((3, 3), 0.7)
    alpha = 0.3
    np.testing.assert_allclose(x0_from_noise(math.sqrt(alpha) * c, np.zeros_like(c), alpha), c, atol=1e-15)
    x0 = x0_from_noise(np.array([1.0 + math.sqrt(0.75)]), np.array([1.0]), 0.25)
    assert x0[0] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(DomainError):
        x0_from_noise(np.ones(2), np.ones(2), 0.0)


def test_ddim_scalar_example():
    # x0 = 2.0 recovered, then 0.8 * 2.0 + 0.6 * 1.0
    out = ddim_update(np.array([1.0 + math.sqrt(0.75)]), np.array([1.0]), 0.25, 0.64)
    assert out[0] == pytest.approx(2.2, abs=1e-12)


def test_ddim_to_clean_limit():
    rng = np.random.default_rng(3)
    x0, eps = rng.normal(size=(2, 5, 5))
    x_t = diffuse_at(x0, eps, 0.2)
    np.testing.assert_allclose(ddim_update(x_t, eps, 0.2, 1.0), x0, atol=1e-12)


def test_ddim_ordering():
    x = np.zeros(3)
    with pytest.raises(OrderingError):
        ddim_step(x, x, 0.3, 0.5, COSINE)
    with pytest.raises(OrderingError):
        ddim_step(x, x, 0.3, 0.3, COSINE)


@pytest.mark.parametrize("n_steps", [1, 5, 15])
def test_perfect_denoiser_loop_returns_x0(n_steps):
    rng = np.random.default_rng(n_steps)
    x0 = rng.uniform(0, 1, size=(8, 8, 3))
    x = rng.standard_normal(x0.shape)
    times = sampling_times(n_steps)
    for k, t in enumerate(times):
        s, n = signal_rates(COSINE, t)
        eps = (x - s * x0) / n
        if k + 1 < n_steps:
            x = ddim_step(x, eps, t, times[k + 1], COSINE)
        else:
            x = estimate_x0(x, eps, t, COSINE)
    np.testing.assert_allclose(x, x0, rtol=1e-5, atol=1e-12)


def test_sampling_times():
    np.testing.assert_allclose(sampling_times(3), [1.0, 2 / 3, 1 / 3])
    assert sampling_times(15).size == 15
    with pytest.raises(DomainError):
        sampling_times(0)


def test_noise_loss_examples():
    assert noise_loss(np.ones(4), np.ones(4)) == 0.0
    assert noise_loss(np.array([1.0, -1.0]), np.zeros(2)) == pytest.approx(1.0)
    assert noise_loss(np.array([2.0]), np.array([-1.0])) == pytest.approx(3.0)
    t = noise_loss(torch.tensor([2.0]), torch.tensor([-1.0]))
    assert isinstance(t, torch.Tensor) and float(t) == pytest.approx(3.0)


def test_batched_times_broadcast():
    rng = np.random.default_rng(5)
    x0, eps = rng.normal(size=(2, 4, 6, 6, 3))
    t = np.array([0.1, 0.4, 0.7, 0.95])
    batched = forward_diffuse(x0, eps, t, COSINE)
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward_diffuse(x0[i], eps[i], t[i], COSINE), atol=1e-14)


finite = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(
    x0=arrays(np.float64, (4, 4, 3), elements=finite),
    eps=arrays(np.float64, (4, 4, 3), elements=finite),
    t=st.floats(0, 1),
)
def test_round_trip(x0, eps, t):
    x_t = forward_diffuse(x0, eps, t, COSINE)
    np.testing.assert_allclose(estimate_x0(x_t, eps, t, COSINE), x0, atol=1e-6, rtol=0)


@settings(max_examples=60, deadline=None)
@given(
    a=arrays(np.float64, 6, elements=finite),
    b=arrays(np.float64, 6, elements=finite),
    c=arrays(np.float64, 6, elements=finite),
)
def test_noise_loss_is_a_metric(a, b, c):
    assert noise_loss(a, b) >= 0
    assert noise_loss(a, b) == pytest.approx(noise_loss(b, a))
    assert noise_loss(a, c) <= noise_loss(a, b) + noise_loss(b, c) + 1e-12
    assert noise_loss(a, a) == 0
