#!/usr/bin/env python3

"""
Test suite for nuts.py
"""

import numpy as np
import pytest

from arcsurv import diagnostics, gibbs, nuts
from arcsurv.errors import NumericalError
from arcsurv.nuts import DualAveraging, NutsSampler, WelfordVariance


def standard_normal(theta):
    return -0.5 * theta @ theta, -theta


def correlated_normal(rho):
    precision = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))

    def value_and_grad(theta):
        g = precision @ theta
        return -0.5 * theta @ g, -g

    return value_and_grad


def grad_only(value_and_grad):
    return lambda theta: value_and_grad(theta)[1]


def test_leapfrog_reversible():
    theta0 = np.array([1.0, -0.5, 2.0])
    r0 = np.array([0.3, 0.1, -1.2])
    grad = grad_only(standard_normal)
    theta, r, divergent = nuts.leapfrog(theta0, r0, 0.1, 50, grad)
    assert not divergent
    back, r_back, _ = nuts.leapfrog(theta, -r, 0.1, 50, grad)
    assert back == pytest.approx(theta0, abs=1e-10)
    assert -r_back == pytest.approx(r0, abs=1e-10)


def test_leapfrog_zero_step_is_identity():
    theta0 = np.array([1.0, 2.0])
    r0 = np.array([-1.0, 0.5])
    theta, r, divergent = nuts.leapfrog(theta0, r0, 0.0, 10, grad_only(standard_normal))
    assert np.array_equal(theta, theta0)
    assert np.array_equal(r, r0)
    assert not divergent


def test_leapfrog_energy_has_no_drift():
    theta = np.array([1.0])
    r = np.array([0.0])
    grad = grad_only(standard_normal)
    errors = []
    for _ in range(1000):
        theta, r, _ = nuts.leapfrog(theta, r, 0.01, 1, grad)
        errors.append(0.5 * theta @ theta + 0.5 * r @ r - 0.5)
    errors = np.abs(errors)
    # second-order integrator: bounded, oscillating O(step^2) error
    assert errors.max() < 1e-4
    assert errors[-100:].max() <= 1.01 * errors[:700].max()


def test_leapfrog_non_finite_gradient_is_divergence():
    def grad(theta):
        if theta[0] > 0.5:
            raise NumericalError("overflow")
        return -theta

    theta, r, divergent = nuts.leapfrog([0.0], [1.0], 0.2, 10, grad)
    assert divergent
    assert theta[0] > 0.5

    def nan_grad(theta):
        return np.full_like(theta, np.nan)

    assert nuts.leapfrog([0.0], [1.0], 0.2, 10, nan_grad)[2]


def hmc_step(theta, value_and_grad, step, rng):
    """Single-leapfrog HMC with a random direction and a Metropolis correction."""
    r = rng.standard_normal(theta.size)
    direction = 1 if rng.random() < 0.5 else -1
    logp, _ = value_and_grad(theta)
    new, r_new, _ = nuts.leapfrog(theta, r, direction * step, 1, grad_only(value_and_grad))
    log_ratio = (value_and_grad(new)[0] - 0.5 * r_new @ r_new) - (logp - 0.5 * r @ r)
    return new if np.log(rng.random()) < log_ratio else theta


def test_nuts_depth_zero_is_one_step_hmc():
    value_and_grad = correlated_normal(0.5)
    nuts_rng = np.random.default_rng(8)
    hmc_rng = np.random.default_rng(8)
    theta_nuts = theta_hmc = np.array([1.5, -0.5])
    for _ in range(200):
        theta_nuts, _, _, info = nuts.nuts_step(
            theta_nuts, value_and_grad, 0.9, nuts_rng, max_tree_depth=0
        )
        theta_hmc = hmc_step(theta_hmc, value_and_grad, 0.9, hmc_rng)
        assert info.n_leapfrog == 1
        assert info.depth == 0
        assert theta_nuts == pytest.approx(theta_hmc, abs=1e-12)


def test_nuts_step_respects_depth_cap():
    rng = np.random.default_rng(0)
    theta = np.array([3.0, 3.0])
    for _ in range(20):
        theta, _, _, info = nuts.nuts_step(theta, standard_normal, 0.01, rng, max_tree_depth=3)
        assert info.depth <= 3
        assert info.n_leapfrog <= 2 ** 4 - 1


def test_nuts_step_returns_consistent_state():
    rng = np.random.default_rng(1)
    theta, logp, grad, info = nuts.nuts_step(np.array([0.5, 1.0]), standard_normal, 0.5, rng)
    expected_logp, expected_grad = standard_normal(theta)
    assert logp == pytest.approx(expected_logp)
    assert grad == pytest.approx(expected_grad)
    assert 0 <= info.accept_stat <= 1
    assert not info.divergent


def test_nuts_step_flags_divergence():
    def wall(theta):
        if np.any(np.abs(theta) > 2):
            raise NumericalError("outside")
        return standard_normal(theta)

    rng = np.random.default_rng(2)
    divergent = 0
    theta = np.zeros(2)
    for _ in range(50):
        theta, _, _, info = nuts.nuts_step(theta, wall, 1.5, rng)
        divergent += info.divergent
        assert np.all(np.abs(theta) <= 2)
    assert divergent > 0


def test_dual_averaging_on_target():
    dual = DualAveraging(0.3, target=0.8)
    for _ in range(20):
        step = dual.update(0.8)
    assert step == pytest.approx(3.0)
    assert dual.final_step_size == pytest.approx(3.0)


def test_dual_averaging_shrinks_on_rejection():
    dual = DualAveraging(1.0, target=0.8)
    steps = [dual.update(0.0) for _ in range(50)]
    assert steps[-1] < steps[0] < 10.0
    dual.restart(0.5)
    assert dual.count == 0
    assert dual.final_step_size == pytest.approx(0.5)


def test_find_reasonable_step_size():
    rng = np.random.default_rng(3)
    step = nuts.find_reasonable_step_size(np.array([0.1, -0.2]), standard_normal, rng)
    assert 0.1 < step < 10
    narrow = nuts.find_reasonable_step_size(
        np.zeros(2), lambda x: (-0.5e4 * x @ x, -1e4 * x), np.random.default_rng(3)
    )
    assert narrow < step


def test_welford_variance():
    x = np.random.default_rng(4).normal(0, [1.0, 3.0], size=(200, 2))
    welford = WelfordVariance(2)
    for row in x:
        welford.add(row)
    assert welford.mean == pytest.approx(x.mean(axis=0))
    n = 200
    expected = (n / (n + 5)) * x.var(axis=0, ddof=1) + 1e-3 * 5 / (n + 5)
    assert welford.variance() == pytest.approx(expected)


def run_sampler(value_and_grad, theta, iterations, burn_in, seed=0, **kwargs):
    sampler = NutsSampler(
        value_and_grad, theta.size, np.random.default_rng(seed), burn_in, **kwargs
    )
    draws, steps = [], []
    for iteration in range(iterations):
        theta, _ = sampler.step(theta, iteration)
        if iteration >= burn_in:
            draws.append(theta)
            steps.append(sampler.step_size)
    return sampler, np.array(draws), steps


def test_sampler_freezes_step_size():
    sampler, _, steps = run_sampler(standard_normal, np.ones(2), 300, 200)
    assert len(set(steps)) == 1
    assert sampler.transitions == 100


def test_sampler_adapts_mass_matrix():
    scales = np.array([0.1, 5.0])

    def scaled(theta):
        return -0.5 * np.sum((theta / scales) ** 2), -theta / scales ** 2

    sampler, _, _ = run_sampler(scaled, np.ones(2), 400, 400)
    ratio = sampler.inv_mass[1] / sampler.inv_mass[0]
    assert ratio > 100


def test_sampler_counts_burn_in_divergences():
    def wall(theta):
        if np.any(np.abs(theta) > 2):
            raise NumericalError("outside")
        return standard_normal(theta)

    sampler = NutsSampler(wall, 2, np.random.default_rng(5), burn_in=10)
    sampler.initialise(np.zeros(2))
    sampler.step_size = 50.0
    sampler.step(np.zeros(2), 0)
    assert sampler.burn_in_divergences == 1
    assert sampler.divergences == 0


@pytest.mark.slow
def test_sampler_standard_normal_moments():
    sampler, draws, _ = run_sampler(standard_normal, np.full(2, 3.0), 11000, 1000, seed=6)
    assert np.abs(draws.mean(axis=0)).max() <= 0.05
    assert np.abs(np.cov(draws.T) - np.eye(2)).max() <= 0.05
    assert 0.65 <= sampler.acceptance_rate <= 0.95
    assert sampler.divergences == 0


@pytest.mark.slow
def test_sampler_beats_random_walk_on_correlated_target():
    value_and_grad = correlated_normal(0.9)
    iterations, burn_in = 3000, 1000
    _, nuts_draws, _ = run_sampler(value_and_grad, np.zeros(2), iterations, burn_in, seed=7)

    rng = np.random.default_rng(7)
    adaptation_scale = 0.0
    x = np.zeros(2)
    current = value_and_grad(x)[0]
    rw_draws = []
    for k in range(1, iterations + 1):
        x, current, prob = gibbs.rw_metropolis(
            x, lambda y: value_and_grad(y)[0], np.exp(adaptation_scale), rng, current
        )
        if k <= burn_in:
            adaptation_scale = gibbs.adapt_scales(adaptation_scale, prob, gibbs.VECTOR_TARGET, k)
        else:
            rw_draws.append(x)
    rw_draws = np.array(rw_draws)

    for j in range(2):
        nuts_ess = diagnostics.effective_sample_size(nuts_draws[None, :, j])
        rw_ess = diagnostics.effective_sample_size(rw_draws[None, :, j])
        assert nuts_ess >= 3 * rw_ess
