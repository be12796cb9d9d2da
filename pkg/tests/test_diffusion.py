import warnings

import numpy as np
import pytest
import torch

from imputad.diffusion import (
    NoiseSchedule,
    build_schedule,
    closed_form_noise,
    forward_corrupt,
    make_generator,
    oracle_noise,
    record_forward_trajectory,
    reverse_step,
    standard_normal,
)
from imputad.errors import ConfigError, InferenceError


class TestSchedule:
    def test_quadratic_endpoints_and_products(self):
        sched = build_schedule(T=50, beta_min=1e-4, beta_max=0.5)

        assert sched.T == 50
        assert sched.beta_at(1) == pytest.approx(1e-4)
        assert sched.beta_at(50) == pytest.approx(0.5)
        assert np.all(np.diff(sched.beta) > 0)
        np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1.0 - sched.beta))
        # square roots are evenly spaced
        np.testing.assert_allclose(np.diff(np.sqrt(sched.beta)), np.diff(np.sqrt(sched.beta))[0])

    def test_posterior_variance(self):
        sched = build_schedule(T=10, shape="linear")
        assert sched.tilde_beta_at(1) == pytest.approx(sched.beta_at(1))
        expected = (1 - sched.alpha_bar_at(4)) / (1 - sched.alpha_bar_at(5)) * sched.beta_at(5)
        assert sched.tilde_beta_at(5) == pytest.approx(expected)

    def test_constant_schedule(self):
        sched = build_schedule(T=4, beta_min=0.1, beta_max=0.1)
        np.testing.assert_allclose(sched.beta, 0.1)

    def test_invalid_schedules(self):
        with pytest.raises(ConfigError):
            build_schedule(T=0)
        with pytest.raises(ConfigError):
            build_schedule(beta_min=0.6, beta_max=0.5)
        with pytest.raises(ConfigError):
            build_schedule(beta_max=1.0)
        with pytest.raises(ConfigError):
            build_schedule(shape="cosine")

    def test_step_bounds(self):
        sched = build_schedule(T=5)
        with pytest.raises(InferenceError):
            sched.beta_at(0)
        with pytest.raises(InferenceError):
            sched.alpha_bar_at(6)

    def test_default_schedule_nearly_destroys_the_signal(self):
        sched = build_schedule()
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar_at(50) < 0.01

    def test_tensors_come_out_writable(self):
        sched = build_schedule(T=5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            tensors = sched.tensors(dtype=torch.float64)
        tensors["beta"][0] = 0.0
        assert sched.beta_at(1) > 0
        np.testing.assert_allclose(tensors["alpha_bar"].numpy(), sched.alpha_bar)

    def test_serialization(self):
        sched = build_schedule(T=7)
        restored = NoiseSchedule.from_dict(sched.to_dict())
        assert restored.T == 7
        assert restored.shape == "quadratic"
        np.testing.assert_array_equal(restored.alpha_bar, sched.alpha_bar)


def test_forward_corrupt_is_the_closed_form_marginal():
    sched = build_schedule(T=5)
    x0 = torch.ones(3, 2)
    eps = torch.full((3, 2), 2.0)
    out = forward_corrupt(x0, 3, eps, sched)
    a = sched.alpha_bar_at(3)
    torch.testing.assert_close(out, torch.full((3, 2), a ** 0.5 + 2.0 * (1 - a) ** 0.5))


def test_closed_form_noise_reproduces_recorded_states():
    sched = build_schedule(T=6)
    x0 = torch.randn(4, 3, generator=make_generator(1), dtype=torch.float64)
    trajectory = record_forward_trajectory(x0, sched, make_generator(2))

    for t in (1, 3, 6):
        eps = closed_form_noise(trajectory, t, sched)
        torch.testing.assert_close(forward_corrupt(x0, t, eps, sched), trajectory.state(t))


def test_oracle_noise_inverts_the_forward_chain():
    sched = build_schedule(T=8)
    x0 = torch.randn(5, 2, generator=make_generator(3), dtype=torch.float64)
    trajectory = record_forward_trajectory(x0, sched, make_generator(4))

    x = trajectory.state(sched.T)
    for t in range(sched.T, 0, -1):
        x = reverse_step(x, oracle_noise(trajectory, t, sched), t, sched)
        expected = trajectory.state(t - 1) if t > 1 else x0
        torch.testing.assert_close(x, expected)


def test_oracle_inversion_at_window_scale():
    sched = build_schedule(T=50)
    x0 = torch.randn(100, 4, generator=make_generator(5), dtype=torch.float64)
    trajectory = record_forward_trajectory(x0, sched, make_generator(6))

    x = trajectory.state(sched.T)
    for t in range(sched.T, 0, -1):
        x = reverse_step(x, oracle_noise(trajectory, t, sched), t, sched)
    assert float((x - x0).abs().max()) < 1e-5


def test_terminal_variance_matches_the_schedule():
    sched = build_schedule()
    x0 = torch.zeros(10_000, dtype=torch.float64)
    trajectory = record_forward_trajectory(x0, sched, make_generator(7))

    variance = float(trajectory.state(sched.T).var())
    assert variance == pytest.approx(1.0 - sched.alpha_bar_at(sched.T), rel=0.05)


def test_reverse_step_is_linear():
    sched = build_schedule()
    gen = make_generator(8)
    x1, x2, e1, e2, z1, z2 = (torch.randn(6, 3, generator=gen, dtype=torch.float64) for _ in range(6))
    a, b = 0.7, -1.9

    for t in (1, 17, 50):
        combined = reverse_step(a * x1 + b * x2, a * e1 + b * e2, t, sched, a * z1 + b * z2)
        separate = a * reverse_step(x1, e1, t, sched, z1) + b * reverse_step(x2, e2, t, sched, z2)
        assert float((combined - separate).abs().max()) < 1e-9


def test_reverse_step_adds_scaled_noise():
    sched = build_schedule(T=5)
    x = torch.zeros(2, 2)
    z = torch.ones(2, 2)
    out = reverse_step(x, torch.zeros(2, 2), 3, sched, z)
    torch.testing.assert_close(out, torch.full((2, 2), sched.tilde_beta_at(3) ** 0.5))


class TestGenerators:
    def test_same_keys_same_stream(self):
        a = torch.randn(6, generator=make_generator(0, 3, 1))
        b = torch.randn(6, generator=make_generator(0, 3, 1))
        c = torch.randn(6, generator=make_generator(0, 3, 2))
        torch.testing.assert_close(a, b)
        assert not torch.equal(a, c)

    def test_per_row_generators_are_batch_independent(self):
        batched = standard_normal((2, 4, 3), [make_generator(0, 1), make_generator(0, 2)])
        alone = standard_normal((1, 4, 3), [make_generator(0, 2)])
        torch.testing.assert_close(batched[1], alone[0])

    def test_generator_count_must_match_batch(self):
        with pytest.raises(InferenceError):
            standard_normal((3, 2), [make_generator(0)])
