#!/usr/bin/env python3

"""
Test suite for likelihood.py
"""

import numpy as np
import pytest

from scipy import optimize, stats

from arcsurv import likelihood, quadrature, splines
from arcsurv.errors import DomainError, NumericalError
from arcsurv.likelihood import JointModel
from arcsurv.models import ModelSpec, ParameterState, SubjectContainer, SubjectRecord
from arcsurv.splines import SplineConfig


SPLINE = SplineConfig(order=3, inner_knots=[12], boundary=(0, 24))


def make_subjects(n_covariates=1):
    rng = np.random.default_rng(11)
    subjects = SubjectContainer()
    for i, (t, delta) in enumerate([(10.0, 1), (4.5, 0), (18.0, 1), (7.2, 0)]):
        times = np.array([s for s in (0, 2, 6, 12, 18) if s <= t])
        subjects.append(
            SubjectRecord(
                id=i + 1,
                t=t,
                delta=delta,
                x=rng.integers(0, 2, size=n_covariates),
                times=times,
                z=rng.normal(1.0, 1.0, size=times.size),
            )
        )
    return subjects


def model1_state(n=4, gamma=None):
    rng = np.random.default_rng(3)
    return ParameterState(
        lam=0.02,
        beta=[0.05],
        alpha=0.25,
        mu=[1.2, 0.25],
        Sigma=[[2, 0.3], [0.3, 0.5]],
        sigma2=1.5,
        gamma=gamma,
        b=rng.normal([1.2, 0.25], 0.3, size=(n, 2)),
    )


def model2_state(n=4):
    rng = np.random.default_rng(5)
    return ParameterState(
        lam=0.02,
        beta=[0.05],
        alpha=0.1,
        mu=[1.2, 0.25, 1.2, 0.25],
        Sigma=np.eye(4) + 0.2,
        sigma2=1.5,
        b=rng.normal(1.0, 0.2, size=(n, 4)),
    )


@pytest.fixture
def subjects():
    return make_subjects()


@pytest.fixture
def spec1():
    return ModelSpec(kind="I", n_covariates=1)


@pytest.fixture
def spec2():
    return ModelSpec(kind="II", n_covariates=1, spline=SPLINE, quad_points=200)


def single(t=10.0, delta=1, x=(1.0,), times=(0.0,), z=(0.0,)):
    return SubjectRecord(id="1", t=t, delta=delta, x=list(x), times=list(times), z=list(z))


def scalar_state(lam=0.02, beta=0.05, alpha=0.25, b=(0.0, 0.0), sigma2=4.0, gamma=None):
    return ParameterState(
        lam=lam, beta=[beta], alpha=alpha, mu=[0, 0], Sigma=np.eye(2),
        sigma2=sigma2, gamma=gamma, b=[list(b)],
    )


@pytest.mark.parametrize(
    "b1,t,expected", [(0, 7, 7.0), (0.75, 4, 5.0), (0.25, 10, 10.307764064)]
)
def test_arc_length_model1(b1, t, expected):
    assert likelihood.arc_length_model1(b1, t) == pytest.approx(expected, abs=1e-9)


def test_arc_length_model2_constant_trajectory():
    assert likelihood.arc_length_model2([2.0] * 4, SPLINE, 17.0, 50) == pytest.approx(17.0)


def test_arc_length_model2_linear_reproduction():
    b = splines.greville_abscissae(SPLINE)
    value = likelihood.arc_length_model2(b, SPLINE, 20.0, 10)
    assert value == pytest.approx(20 * np.sqrt(2), abs=1e-8)


def test_arc_length_model2_matches_romberg():
    b = np.array([0.4, 2.0, -1.0, 3.0])

    def integrand(s):
        return np.hypot(1.0, splines.basis_derivative_matrix(SPLINE, s) @ b)

    # the knot at 12 breaks smoothness, integrate each piece separately
    oracle = sum(
        float(quadrature.romberg(integrand, a, c, tol=1e-9))
        for a, c in [(0, 12), (12, 20)]
    )
    assert likelihood.arc_length_model2(b, SPLINE, 20.0, 4000) == pytest.approx(oracle, abs=1e-6)


def test_arc_length_model2_outside_domain():
    with pytest.raises(DomainError):
        likelihood.arc_length_model2([0] * 4, SPLINE, 25.0, 10)


def test_log_hazard(spec1):
    subject = single()
    assert likelihood.log_hazard(spec1, scalar_state(), subject, 10.0) == pytest.approx(
        -1.362023, abs=1e-6
    )
    assert likelihood.log_hazard(spec1, scalar_state(), subject, 0.0) == pytest.approx(
        np.log(0.02) + 0.05
    )
    flat = scalar_state(beta=0.0, alpha=0.0, b=(0.0, 3.0))
    assert likelihood.log_hazard(spec1, flat, subject, 6.0) == pytest.approx(np.log(0.02))
    with pytest.raises(DomainError):
        likelihood.log_hazard(spec1, scalar_state(), subject, 11.0)


def test_log_survival_exponential(spec1):
    subject = single(t=50.0, x=(0.0,))
    state = scalar_state(alpha=0.0)
    assert likelihood.log_survival(spec1, state, subject, 50.0) == pytest.approx(-1.0)


def test_log_survival_closed_form(spec1):
    subject = single(t=20.0, x=(0.0,))
    value = likelihood.log_survival(spec1, scalar_state(), subject, 4 * np.log(13.5))
    assert value == pytest.approx(-1.0, abs=1e-12)


def test_log_survival_continuous_at_zero_alpha(spec1):
    subject = single(t=1.0, x=(0.0,))
    alpha = 1e-8
    series = likelihood.log_survival(spec1, scalar_state(alpha=alpha), subject, 1.0)
    exact = -0.02 * np.expm1(alpha) / alpha
    limit = -0.02
    assert abs(series - exact) <= 1e-9
    assert abs(series - limit) <= 1e-9


def test_log_survival_overflow(spec1):
    subject = single(t=10.0)
    with pytest.raises(NumericalError, match="Subject 1 at s=10"):
        likelihood.log_survival(spec1, scalar_state(alpha=500.0), subject, 10.0)


def test_model2_constant_trajectory_matches_model1():
    subject = single(t=10.0)
    spec1 = ModelSpec(kind="I", n_covariates=1)
    spec2 = ModelSpec(kind="II", n_covariates=1, spline=SPLINE, quad_points=4000)
    state1 = scalar_state()
    state2 = ParameterState(
        lam=0.02, beta=[0.05], alpha=0.25, mu=[0] * 4, Sigma=np.eye(4),
        sigma2=4.0, b=[[0.7] * 4],
    )
    assert likelihood.log_survival(spec2, state2, subject, 10.0) == pytest.approx(
        likelihood.log_survival(spec1, state1, subject, 10.0), abs=1e-6
    )
    assert likelihood.log_hazard(spec2, state2, subject, 10.0) == pytest.approx(
        likelihood.log_hazard(spec1, state1, subject, 10.0), abs=1e-9
    )


def test_log_lik_survival(spec1):
    state = scalar_state(alpha=0.0, beta=0.0)
    event = single(t=50.0)
    assert likelihood.log_lik_survival(spec1, state, event) == pytest.approx(-4.912023, abs=1e-6)
    censored = single(t=50.0, delta=0)
    assert likelihood.log_lik_survival(spec1, state, censored) == pytest.approx(
        likelihood.log_survival(spec1, state, censored, 50.0)
    )


def test_log_lik_survival_matches_closed_form(spec1):
    # direct transcription of the Model I likelihood at fixed b
    lam, beta, alpha, b1, t, x = 0.03, -0.4, 0.15, 0.6, 8.0, 1.0
    c = np.sqrt(1 + b1 ** 2)
    expected = (
        np.log(lam) + x * beta + alpha * t * c
        - lam * np.exp(x * beta) / (alpha * c) * (np.exp(alpha * t * c) - 1)
    )
    state = scalar_state(lam=lam, beta=beta, alpha=alpha, b=(0.0, b1))
    assert likelihood.log_lik_survival(spec1, state, single(t=t)) == pytest.approx(expected)


def test_log_lik_longitudinal(spec1):
    on_mean = single(times=(0.0, 1.0, 2.0), z=(1.0, 1.5, 2.0))
    state = scalar_state(b=(1.0, 0.5), sigma2=1.0)
    assert likelihood.log_lik_longitudinal(spec1, state, on_mean) == pytest.approx(
        -1.5 * np.log(2 * np.pi)
    )
    one = single(times=(0.0,), z=(2.0,))
    assert likelihood.log_lik_longitudinal(spec1, scalar_state(), one) == pytest.approx(
        -2.112086, abs=1e-6
    )


def test_model_ia_with_zero_gamma_matches_model1(subjects, spec1):
    spec_ia = ModelSpec(kind="Ia", n_covariates=1, longitudinal_covariate=0)
    value_ia = JointModel(spec_ia, subjects).log_posterior(model1_state(gamma=0.0))
    value_i = JointModel(spec1, subjects).log_posterior(model1_state())
    prior_gamma = stats.norm.logpdf(0.0, 0.0, spec_ia.priors.gamma_sd)
    assert value_ia == pytest.approx(value_i + prior_gamma, abs=1e-10)
    for subject in subjects:
        assert likelihood.log_lik_longitudinal(
            spec_ia, scalar_state(gamma=0.0), subject
        ) == pytest.approx(likelihood.log_lik_longitudinal(spec1, scalar_state(), subject))


def test_log_prior_random_effects():
    state = ParameterState(
        lam=1, beta=[], alpha=0, mu=[0.5, -1], Sigma=np.eye(2), sigma2=1, b=[[0.5, -1]]
    )
    assert likelihood.log_prior_random_effects(state, 0) == pytest.approx(-np.log(2 * np.pi))

    state.Sigma = np.diag([2.0, 5.0])
    state.b = np.array([[1.5, 0.0]])
    expected = -0.5 * (np.log((2 * np.pi) ** 2 * 10) + 1 / 2 + 1 / 5)
    assert likelihood.log_prior_random_effects(state, 0) == pytest.approx(expected, abs=1e-12)

    state.Sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(np.linalg.LinAlgError):
        likelihood.log_prior_random_effects(state, 0)


def test_log_prior_random_effects_integrates_to_one():
    rng = np.random.default_rng(9)
    state = ParameterState(
        lam=1, beta=[], alpha=0, mu=[1.0, -0.5], Sigma=[[2, 0.4], [0.4, 1]], sigma2=1
    )
    # importance sampling from a wider proposal
    proposal = stats.multivariate_normal(state.mu, 4 * state.Sigma)
    draws = proposal.rvs(size=20000, random_state=rng)
    weights = []
    for draw in draws:
        state.b = np.atleast_2d(draw)
        weights.append(np.exp(likelihood.log_prior_random_effects(state, 0) - proposal.logpdf(draw)))
    assert np.mean(weights) == pytest.approx(1.0, rel=0.02)


def direct_log_posterior(spec, state, subjects):
    """Independent per-subject transcription of the Model I posterior."""
    total = 0.0
    for i, subject in enumerate(subjects):
        b0, b1 = state.b[i]
        c = np.sqrt(1 + b1 ** 2)
        lp = float(subject.x @ state.beta)
        H = state.lam * np.exp(lp) * np.expm1(state.alpha * c * subject.t) / (state.alpha * c)
        total += subject.delta * (np.log(state.lam) + lp + state.alpha * subject.t * c) - H
        total += stats.norm.logpdf(
            subject.z, b0 + b1 * subject.times, np.sqrt(state.sigma2)
        ).sum()
        total += stats.multivariate_normal.logpdf(state.b[i], state.mu, state.Sigma)
    p = spec.priors
    total += stats.gamma.logpdf(state.lam, p.lambda_shape, scale=1 / p.lambda_rate)
    total += stats.norm.logpdf(state.beta, 0, p.beta_sd).sum()
    total += stats.norm.logpdf(state.alpha, 0, p.alpha_sd)
    total += stats.norm.logpdf(state.mu, 0, p.mu_sd).sum()
    total += stats.invgamma.logpdf(state.sigma2, p.sigma2_shape, scale=p.sigma2_rate)
    total += stats.invwishart.logpdf(state.Sigma, df=3, scale=np.eye(2))
    return total


def test_log_posterior_matches_direct(subjects, spec1):
    state = model1_state()
    value = likelihood.log_posterior(spec1, state, subjects)
    assert value == pytest.approx(direct_log_posterior(spec1, state, subjects), abs=1e-10)


def test_log_posterior_additive_in_subjects(subjects, spec1):
    state = model1_state()
    model = JointModel(spec1, subjects)
    survival, longitudinal, random = model.subject_terms(state)

    reduced = SubjectContainer(subjects[:3])
    smaller = state.copy()
    smaller.b = state.b[:3]
    difference = model.log_posterior(state) - JointModel(spec1, reduced).log_posterior(smaller)
    assert difference == pytest.approx(survival[3] + longitudinal[3] + random[3], abs=1e-10)


def test_log_posterior_permutation_invariant(subjects, spec1):
    state = model1_state()
    order = [2, 0, 3, 1]
    permuted = state.copy()
    permuted.b = state.b[order]
    value = likelihood.log_posterior(spec1, state, subjects)
    other = likelihood.log_posterior(spec1, permuted, SubjectContainer(subjects[i] for i in order))
    assert abs(value - other) < 1e-9


def test_vectorised_terms_match_per_subject(subjects, spec1, spec2):
    for spec, state in [(spec1, model1_state()), (spec2, model2_state())]:
        model = JointModel(spec, subjects)
        survival, longitudinal, random = model.subject_terms(state)
        for i, subject in enumerate(subjects):
            assert survival[i] == pytest.approx(
                likelihood.log_lik_survival(spec, state, subject, i=i), abs=1e-10
            )
            assert longitudinal[i] == pytest.approx(
                likelihood.log_lik_longitudinal(spec, state, subject, i=i), abs=1e-10
            )
            assert random[i] == pytest.approx(
                likelihood.log_prior_random_effects(state, i), abs=1e-10
            )


def test_deviance(subjects, spec1):
    model = JointModel(spec1, subjects)
    state = model1_state()
    assert model.deviance(state) == pytest.approx(-2 * model.log_likelihood(state))


@pytest.mark.parametrize(
    "attribute,value",
    [("lam", 0.0), ("sigma2", -1.0), ("Sigma", np.array([[1.0, 2.0], [2.0, 1.0]]))],
)
def test_log_posterior_boundary_is_minus_infinity(subjects, spec1, attribute, value):
    state = model1_state()
    setattr(state, attribute, value)
    assert likelihood.log_posterior(spec1, state, subjects) == -np.inf


def test_log_posterior_overflow_is_minus_infinity(subjects, spec1):
    state = model1_state()
    state.alpha = 800.0
    assert likelihood.log_posterior(spec1, state, subjects) == -np.inf


def test_log_posterior_decreasing_in_sigma2(subjects, spec1):
    state = model1_state()
    model = JointModel(spec1, subjects)
    ssr = (model.longitudinal_residuals(state) ** 2).sum()
    n = model.obs_z.size
    # beyond the conditional mode sigma2 = ssr / n the density keeps falling
    values = []
    for sigma2 in np.array([2, 4, 8, 16]) * ssr / n:
        state.sigma2 = sigma2
        values.append(model.log_posterior(state))
    assert np.all(np.diff(values) < 0)


def test_packer_round_trip(subjects, spec2):
    model = JointModel(spec2, subjects)
    state = model2_state()
    theta = model.packer.pack(state)
    assert theta.size == model.packer.size == len(model.packer.coordinate_names())
    back = model.packer.unpack(theta)
    assert back.lam == pytest.approx(state.lam)
    assert back.Sigma == pytest.approx(state.Sigma)
    assert back.b == pytest.approx(state.b)


def test_packer_log_jacobian(subjects, spec1):
    model = JointModel(spec1, subjects)
    packer = model.packer
    theta = packer.pack(model1_state())
    positions = np.concatenate(
        [
            np.arange(packer.size)[packer.slices[name]]
            for name in ("log_lambda", "chol", "log_sigma2")
        ]
    )

    def constrained(values):
        point = theta.copy()
        point[positions] = values
        state = packer.unpack(point)
        rows, cols = np.tril_indices(2)
        return np.concatenate([[state.lam], state.Sigma[rows, cols], [state.sigma2]])

    h = 1e-6
    jacobian = np.empty((positions.size, positions.size))
    for j in range(positions.size):
        step = np.zeros(positions.size)
        step[j] = h
        jacobian[:, j] = (
            constrained(theta[positions] + step) - constrained(theta[positions] - step)
        ) / (2 * h)
    _, logdet = np.linalg.slogdet(jacobian)
    assert packer.log_jacobian(theta) == pytest.approx(logdet, abs=1e-6)


def finite_difference(f, theta, h=1e-5):
    grad = np.empty_like(theta)
    for j in range(theta.size):
        step = np.zeros_like(theta)
        step[j] = h
        grad[j] = (f(theta + step) - f(theta - step)) / (2 * h)
    return grad


@pytest.mark.parametrize("kind", ["I", "Ia", "II"])
def test_gradient_matches_finite_differences(subjects, kind):
    if kind == "II":
        spec = ModelSpec(kind="II", n_covariates=1, spline=SPLINE, quad_points=50)
        base = model2_state()
    else:
        spec = ModelSpec(
            kind=kind, n_covariates=1, longitudinal_covariate=0 if kind == "Ia" else None
        )
        base = model1_state(gamma=0.3 if kind == "Ia" else None)
    model = JointModel(spec, subjects)
    rng = np.random.default_rng(17)
    theta0 = model.packer.pack(base)
    for _ in range(10):
        theta = theta0 + rng.normal(0, 0.05, size=theta0.size)
        value, grad = model.value_and_grad(theta)
        assert value == pytest.approx(model.log_density(theta), abs=1e-8)
        numeric = finite_difference(model.log_density, theta)
        assert grad == pytest.approx(numeric, rel=1e-5, abs=1e-5)


def test_gradient_alpha_component_by_hand(spec1):
    subject = single(t=8.0, x=(1.0,))
    data = SubjectContainer([subject])
    state = scalar_state(lam=0.03, beta=-0.4, alpha=0.15, b=(0.0, 0.6))
    grad = likelihood.grad_log_posterior(spec1, state, data)
    c = np.sqrt(1.6)
    t = 8.0
    a = 0.15 * c * t
    # d/dalpha of lam e^{x beta} (e^{alpha c t} - 1) / (alpha c)
    dH = 0.03 * np.exp(-0.4) * (t * np.exp(a) / 0.15 - np.expm1(a) / (0.15 ** 2 * c))
    expected = t * c - dH - 0.15 / spec1.priors.alpha_sd ** 2
    alpha_index = JointModel(spec1, data).packer.slices["alpha"].start
    assert grad[alpha_index] == pytest.approx(expected, rel=1e-9)


def test_gradient_vanishes_at_mode(spec1):
    data = SubjectContainer([single(t=8.0, x=(1.0,))])
    model = JointModel(spec1, data)
    theta = model.packer.pack(scalar_state(alpha=0.1, b=(0.0, 0.6)))
    index = model.packer.slices["alpha"].start

    def negative(alpha):
        point = theta.copy()
        point[index] = alpha
        return -model.log_density(point)

    result = optimize.minimize_scalar(negative, bracket=(-1, 1), tol=1e-12)
    theta[index] = result.x
    _, grad = model.value_and_grad(theta)
    assert abs(grad[index]) < 1e-4


def test_value_and_grad_overflow(subjects, spec1):
    model = JointModel(spec1, subjects)
    state = model1_state()
    state.alpha = 800.0
    with pytest.raises(NumericalError):
        model.value_and_grad(model.packer.pack(state))
