import math

import numpy as np
import pytest

from feddiffuse.diffusion import (build_schedule, ddpm_sample, draw_noise, posterior_mean, q_sample,
                                  simple_loss)
from feddiffuse.errors import ConfigurationError


def product_loop_alpha_bar(T, beta_start, beta_end):
    acc, out = 1.0, [1.0]
    for i in range(T):
        beta = beta_start + (beta_end - beta_start) * i / (T - 1) if T > 1 else beta_start
        acc *= 1.0 - beta
        out.append(acc)
    return out


def test_default_schedule_endpoints(default_schedule):
    s = default_schedule
    assert s.beta[0] == pytest.approx(1e-4, abs=1e-18)
    assert s.beta[-1] == pytest.approx(0.02, abs=1e-18)
    assert len(s.beta) == len(s.alpha) == len(s.sigma) == 1000
    assert len(s.alpha_bar) == 1001


def test_alpha_bar_matches_product_loop(default_schedule):
    oracle = product_loop_alpha_bar(1000, 1e-4, 0.02)
    np.testing.assert_allclose(default_schedule.alpha_bar, oracle, rtol=1e-12, atol=0)
    assert default_schedule.alpha_bar[-1] == pytest.approx(4.0358e-5, rel=1e-4)
    assert default_schedule.alpha_bar[-1] < 1e-3


def test_schedule_invariants(default_schedule):
    s = default_schedule
    assert np.all(np.diff(s.beta) >= 0) and s.beta[0] > 0 and s.beta[-1] < 1
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.sigma[0] == 0.0
    assert np.max(np.abs(s.alpha_bar[1:] - s.alpha_bar[:-1] * (1 - s.beta))) <= 1e-12
    np.testing.assert_array_equal(s.alpha, 1 - s.beta)


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [1.0, 0.5])
    assert s.sigma[0] == 0.0


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 0.1, 0.2)])
def test_schedule_rejects_bad_config(args):
    with pytest.raises(ConfigurationError):
        build_schedule(*args)


def test_q_sample_zero_noise(default_schedule, rng):
    x0 = rng.standard_normal((3, 1, 4, 4))
    t = np.array([1, 500, 1000])
    out = q_sample(x0, t, np.zeros_like(x0), default_schedule)
    np.testing.assert_array_equal(out, np.sqrt(default_schedule.alpha_bar[t])[:, None, None, None] * x0)


def test_q_sample_degenerate_schedule(rng):
    s = build_schedule(1, 1e-12, 1e-12)
    x0 = rng.standard_normal((2, 1, 3, 3))
    out = q_sample(x0, 1, rng.standard_normal(x0.shape), s)
    np.testing.assert_allclose(out, x0, atol=1e-5)


def test_q_sample_variance_at_T(default_schedule):
    n = 20000
    rng = np.random.default_rng(7)
    x0 = np.zeros((n, 1, 1, 1))
    out = q_sample(x0, np.full(n, 1000), rng.standard_normal(x0.shape), default_schedule).ravel()
    expected = 1 - default_schedule.alpha_bar[1000]
    # sample variance of n Gaussians has std ~ var * sqrt(2 / (n - 1))
    assert abs(out.var(ddof=1) - expected) < 3 * expected * math.sqrt(2 / (n - 1))


def test_q_sample_errors(default_schedule):
    x0 = np.zeros((2, 1, 2, 2))
    with pytest.raises(ValueError):
        q_sample(x0, 1, np.zeros((2, 1, 2, 3)), default_schedule)
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, default_schedule)
    with pytest.raises(ValueError):
        q_sample(x0, 1001, x0, default_schedule)


def test_posterior_mean_cases(default_schedule, rng):
    xt = rng.standard_normal((2, 1, 3, 3))
    t = np.array([10, 900])
    out = posterior_mean(xt, t, np.zeros_like(xt), default_schedule)
    np.testing.assert_allclose(out, xt / np.sqrt(1 - default_schedule.beta[t - 1])[:, None, None, None])

    tiny = build_schedule(1, 1e-12, 1e-12)
    np.testing.assert_allclose(posterior_mean(xt, 1, rng.standard_normal(xt.shape), tiny), xt, atol=1e-5)

    half = build_schedule(1, 0.5, 0.5)
    one = np.ones((1, 1, 1, 1))
    assert posterior_mean(one, 1, np.zeros_like(one), half).item() == pytest.approx(1.41421356, rel=1e-8)
    e = 0.3
    expected = (1 / math.sqrt(0.5)) * (1 - (0.5 / math.sqrt(0.5)) * e)
    assert posterior_mean(one, 1, np.full_like(one, e), half).item() == pytest.approx(expected, rel=1e-12)


def test_simple_loss_perfect_predictor(default_schedule, rng):
    batch = rng.uniform(-1, 1, (5, 1, 4, 4))
    _, eps = draw_noise(default_schedule, 5, (1, 4, 4), np.random.default_rng(9))
    assert simple_loss(lambda xt, t: eps, batch, default_schedule, np.random.default_rng(9)) == 0.0


def test_simple_loss_zero_predictor_is_pixel_count(default_schedule):
    batch = np.zeros((4000, 1, 4, 4))
    loss = simple_loss(lambda xt, t: np.zeros_like(xt), batch, default_schedule, np.random.default_rng(2))
    # ||eps||^2 ~ chi^2_16: mean 16, var 32; 3-sigma band for the mean of 4000 draws
    assert abs(loss - 16) < 3 * math.sqrt(32 / 4000)


def test_simple_loss_deterministic_and_permutation_invariant(default_schedule, rng):
    batch = rng.uniform(-1, 1, (6, 1, 3, 3))
    model = lambda xt, t: 0.5 * xt + 1e-3 * t[:, None, None, None]  # noqa: E731
    a = simple_loss(model, batch, default_schedule, np.random.default_rng(5))
    b = simple_loss(model, batch, default_schedule, np.random.default_rng(5))
    assert a == b
    gens = lambda: [np.random.default_rng([11, i]) for i in range(6)]  # noqa: E731
    perm = np.array([3, 0, 5, 1, 4, 2])
    keyed = simple_loss(model, batch, default_schedule, gens())
    permuted = simple_loss(model, batch[perm], default_schedule, [gens()[i] for i in perm])
    assert keyed == pytest.approx(permuted, rel=1e-14)


def test_ddpm_sample_shape_and_determinism(short_schedule):
    model = lambda xt, t: 0.1 * xt  # noqa: E731
    a = ddpm_sample(model, short_schedule, 3, (1, 5, 5), np.random.default_rng(0))
    b = ddpm_sample(model, short_schedule, 3, (1, 5, 5), np.random.default_rng(0))
    assert a.shape == (3, 1, 5, 5)
    np.testing.assert_array_equal(a, b)


def test_ddpm_sample_single_step():
    s = build_schedule(1, 0.5, 0.5)
    out = ddpm_sample(lambda xt, t: np.zeros_like(xt), s, 4, (1, 2, 2), np.random.default_rng(3))
    x1 = np.random.default_rng(3).standard_normal((4, 1, 2, 2))
    np.testing.assert_allclose(out, x1 / math.sqrt(0.5), rtol=1e-15)


def test_ddpm_sample_rejects_empty(short_schedule):
    with pytest.raises(ValueError):
        ddpm_sample(lambda xt, t: xt, short_schedule, 0, (1, 2, 2), np.random.default_rng(0))
