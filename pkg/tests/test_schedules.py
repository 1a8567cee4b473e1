"""Noise schedules, forward draws, and respaced views."""

import numpy as np
import pytest

import diffusionlab as dl
from diffusionlab.errors import NumericError
from diffusionlab.schedules import (
    forward_step,
    make_cosine_schedule,
    make_linear_schedule,
    predict_x0,
    q_sample,
    q_sample_perturbed,
    q_sample_scaled,
    respace,
    write_schedule_table,
)


def test_linear_endpoints_and_monotonicity():
    sch = make_linear_schedule(1000)
    assert sch.T == 1000
    assert sch.betas[0] == pytest.approx(1e-4, rel=1e-12)
    assert sch.betas[-1] == pytest.approx(0.02, rel=1e-12)
    assert np.all(np.diff(sch.betas) > 0)
    assert np.all((sch.betas > 0) & (sch.betas < 1))
    assert np.all(np.diff(sch.alpha_bars) < 0)


def test_alpha_bars_match_explicit_product():
    # second route: plain python loop, no cumprod
    sch = make_linear_schedule(50)
    acc = 1.0
    for i in range(50):
        acc *= 1.0 - sch.betas[i]
        assert sch.alpha_bars[i] == pytest.approx(acc, rel=1e-12)


def test_alpha_bar_lookup_pads_t0():
    sch = make_linear_schedule(10)
    assert sch.alpha_bar(0) == 1.0
    assert sch.alpha_bar(10) == sch.alpha_bars[-1]
    np.testing.assert_array_equal(
        sch.alpha_bar(np.array([0, 1, 10])),
        np.array([1.0, sch.alpha_bars[0], sch.alpha_bars[9]]),
    )
    with pytest.raises(ValueError):
        sch.alpha_bar(11)
    with pytest.raises(ValueError):
        sch.alpha_bar(-1)


def test_cosine_shape_and_clipping():
    sch = make_cosine_schedule(1000)
    assert sch.kind == "cosine"
    assert np.all(sch.betas <= 0.999)
    assert np.all(sch.betas >= 1e-8)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    # late betas hit the clip exactly once at this T
    assert int(np.sum(sch.betas == 0.999)) == 1
    assert sch.alpha_bars[-1] > 0


def test_posterior_variance_formula():
    sch = make_linear_schedule(100)
    ab = sch.alpha_bars
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    expect = (1.0 - ab_prev) / (1.0 - ab) * sch.betas
    np.testing.assert_allclose(sch.posterior_vars, expect, rtol=1e-12)
    assert sch.posterior_vars[0] == 0.0


def test_q_sample_hand_formula():
    sch = make_linear_schedule(100)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 2))
    t = 37
    got = q_sample(x0, t, eps, sch)
    ab = sch.alpha_bars[t - 1]
    np.testing.assert_allclose(got, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, rtol=1e-14)


def test_q_sample_per_row_t():
    sch = make_linear_schedule(100)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    ts = np.array([1, 50, 100])
    got = q_sample(x0, ts, eps, sch)
    for i, t in enumerate(ts):
        np.testing.assert_allclose(got[i], q_sample(x0[i : i + 1], int(t), eps[i : i + 1], sch)[0])


def test_perturbed_reduces_to_plain_at_gamma_zero():
    sch = make_linear_schedule(100)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((8, 2))
    eps = rng.standard_normal((8, 2))
    xi = rng.standard_normal((8, 2))
    a = q_sample_perturbed(x0, 10, eps, xi, 0.0, sch)
    b = q_sample(x0, 10, eps, sch)
    np.testing.assert_array_equal(a, b)


def test_perturbed_rejects_bad_gamma_and_shape():
    sch = make_linear_schedule(100)
    x0 = np.zeros((4, 2))
    eps = np.zeros((4, 2))
    with pytest.raises(ValueError):
        q_sample_perturbed(x0, 10, eps, np.zeros((3, 2)), 0.1, sch)
    with pytest.raises(ValueError):
        q_sample_perturbed(x0, 10, eps, eps, -0.1, sch)


def test_perturbed_marginal_variance():
    # var(y | x0) = (1 - ab) (1 + gamma^2); moderate-n check, 6 sigma band
    sch = make_linear_schedule(1000)
    gamma, t, n = 0.3, 400, 40000
    rng = np.random.default_rng(3)
    x0 = np.zeros((n, 1))
    y = q_sample_perturbed(x0, t, rng.standard_normal((n, 1)), rng.standard_normal((n, 1)), gamma, sch)
    ab = sch.alpha_bars[t - 1]
    target = (1 - ab) * (1 + gamma**2)
    se = target * np.sqrt(2.0 / (n - 1))
    assert abs(np.var(y, ddof=1) - target) < 6 * se


def test_scaled_equals_scaled_eps_route():
    sch = make_linear_schedule(100)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((6, 2))
    eps = rng.standard_normal((6, 2))
    gamma = 0.25
    a = q_sample_scaled(x0, 20, eps, gamma, sch)
    b = q_sample(x0, 20, np.sqrt(1 + gamma**2) * eps, sch)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_predict_x0_inverts_q_sample():
    sch = make_linear_schedule(1000)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((10, 3))
    eps = rng.standard_normal((10, 3))
    for t in (1, 500, 1000):
        xt = q_sample(x0, t, eps, sch)
        np.testing.assert_allclose(predict_x0(xt, eps, t, sch), x0, rtol=1e-10, atol=1e-12)


def test_predict_x0_floor_guard():
    sch = make_cosine_schedule(1000)
    x = np.zeros((2, 2))
    with pytest.raises(NumericError):
        predict_x0(x, x, 1000, sch, min_alpha_bar=1e-6)


def test_forward_step_marginal():
    # composing single forward steps reproduces the closed-form marginal
    sch = make_linear_schedule(50)
    rng = np.random.default_rng(6)
    n, t_stop = 20000, 30
    x = np.full((n, 1), 0.7)
    for t in range(1, t_stop + 1):
        x = forward_step(x, t, sch, rng)
    ab = sch.alpha_bars[t_stop - 1]
    mean_t, var_t = np.sqrt(ab) * 0.7, 1 - ab
    assert abs(np.mean(x) - mean_t) < 6 * np.sqrt(var_t / n)
    assert abs(np.var(x, ddof=1) - var_t) < 6 * var_t * np.sqrt(2 / (n - 1))


# -- respacing ------------------------------------------------------------------------


def test_respace_step_selection_oracle():
    sch = make_linear_schedule(10)
    view = respace(sch, 4)
    # ceil((i+1) * 10 / 4) = [3, 5, 8, 10]
    np.testing.assert_array_equal(view.steps, [3, 5, 8, 10])
    np.testing.assert_array_equal(view.effective_alpha_bars, sch.alpha_bars[[2, 4, 7, 9]])
    # effective beta bridges the skipped segment: 1 - ab_i / ab_{i-1}
    ab = sch.alpha_bars
    np.testing.assert_allclose(view.effective_betas[1], 1 - ab[4] / ab[2], rtol=1e-12)
    np.testing.assert_allclose(view.effective_betas[0], 1 - ab[2], rtol=1e-12)


def test_respace_adjacent_steps_reuse_parent_beta():
    sch = make_linear_schedule(4)
    view = respace(sch, 3)
    # ceil((i+1) * 4 / 3) = [2, 3, 4]: steps 3 and 4 are parent-adjacent
    np.testing.assert_array_equal(view.steps, [2, 3, 4])
    assert view.effective_betas[1] == sch.betas[2]
    assert view.effective_betas[2] == sch.betas[3]


def test_respace_full_is_bit_identical():
    sch = make_linear_schedule(200)
    view = respace(sch, 200)
    np.testing.assert_array_equal(view.steps, np.arange(1, 201))
    np.testing.assert_array_equal(view.effective_betas, sch.betas)
    np.testing.assert_array_equal(view.effective_alphas, sch.alphas)
    np.testing.assert_array_equal(view.effective_alpha_bars, sch.alpha_bars)
    np.testing.assert_array_equal(view.effective_posterior_vars, sch.posterior_vars)


def test_respace_last_step_is_T_and_errors():
    sch = make_linear_schedule(1000)
    for k in (1, 7, 10, 999, 1000):
        assert respace(sch, k).steps[-1] == 1000
    with pytest.raises(ValueError):
        respace(sch, 0)
    with pytest.raises(ValueError):
        respace(sch, 1001)
    with pytest.raises(ValueError):
        respace(respace(sch, 10), 5)


def test_respaced_uniform_aliases():
    sch = make_linear_schedule(100)
    view = respace(sch, 10)
    np.testing.assert_array_equal(view.betas, view.effective_betas)
    np.testing.assert_array_equal(view.alpha_bars, view.effective_alpha_bars)
    np.testing.assert_array_equal(view.posterior_vars, view.effective_posterior_vars)
    assert view.T == 100


def test_schedule_table_roundtrip(tmp_path):
    sch = make_linear_schedule(25)
    path = tmp_path / "schedule.csv"
    write_schedule_table(sch, path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape[0] == 25
    np.testing.assert_array_equal(rows[:, 1], sch.betas)
    np.testing.assert_array_equal(rows[:, 3], sch.alpha_bars)


def test_build_rejects_bad_betas():
    with pytest.raises(ValueError):
        dl.make_linear_schedule(0)
    with pytest.raises(ValueError):
        dl.make_linear_schedule(10, beta_start=0.0)
    with pytest.raises(ValueError):
        dl.make_linear_schedule(10, beta_end=1.0)
