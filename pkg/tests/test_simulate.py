#!/usr/bin/env python3

"""
Test suite for simulate.py
"""

import numpy as np
import pytest

from arcsurv import simulate
from arcsurv.errors import ConfigError, SimulationError
from arcsurv.models import ModelSpec, ParameterState
from arcsurv.simulate import CovariateLaw, RootConfig, SimulationDesign
from arcsurv.splines import SplineConfig


def model1_cumulative_hazard(t, lam, linpred, alpha, b1):
    c = np.hypot(1, b1)
    return lam * np.exp(linpred) * np.expm1(alpha * c * t) / (alpha * c)


@pytest.fixture
def fine_spec():
    return ModelSpec(
        kind="II",
        n_covariates=0,
        spline=SplineConfig(order=3, inner_knots=[12], boundary=(0, 24)),
        quad_points=4000,
    )


def test_draw_random_effects_zero_cholesky(model1_design):
    b = simulate.draw_random_effects(
        model1_design, np.random.default_rng(0), n=10, cholesky=np.zeros((2, 2))
    )
    assert np.all(b == [1.2, 0.25])


@pytest.mark.slow
def test_draw_random_effects_moments(model1_design):
    b = simulate.draw_random_effects(model1_design, np.random.default_rng(1), n=100000)
    assert np.all(np.abs(b.mean(axis=0) - [1.2, 0.25]) <= 0.02)
    Sigma = np.array([[2.0, 3.0], [3.0, 5.0]])
    error = np.linalg.norm(np.cov(b.T) - Sigma) / np.linalg.norm(Sigma)
    assert error <= 0.03


def test_draw_random_effects_rejects_non_pd(model1_design):
    model1_design.truth.Sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ConfigError) as exc:
        simulate.draw_random_effects(model1_design, np.random.default_rng(0))
    assert exc.value.pointer == "/truth/Sigma"


def test_invert_model1_exponential():
    t = simulate.invert_event_time_model1(np.exp(-1), 0.02, 0.0, 0.0, 0.3)
    assert t == pytest.approx(50.0)


def test_invert_model1_closed_form():
    t = simulate.invert_event_time_model1(np.exp(-1), 0.02, 0.0, 0.25, 0.0)
    assert t == pytest.approx(4 * np.log(13.5), abs=1e-9)
    assert t == pytest.approx(10.410760, abs=1e-6)


def test_invert_model1_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        v = rng.uniform(0.01, 0.99)
        lam = rng.uniform(0.005, 0.1)
        linpred = rng.normal(0, 0.5)
        alpha = rng.uniform(0.01, 0.5)
        b1 = rng.normal(0.25, 2)
        t = simulate.invert_event_time_model1(v, lam, linpred, alpha, b1)
        H = model1_cumulative_hazard(t, lam, linpred, alpha, b1)
        assert H == pytest.approx(-np.log(v), abs=1e-10)


def test_invert_model1_negative_alpha_never_fails():
    # bounded cumulative hazard, the event never happens
    assert simulate.invert_event_time_model1(1e-6, 0.02, 0.0, -1.0, 0.0) == np.inf


def test_invert_model2_matches_model1(fine_spec):
    result = simulate.invert_event_time_model2(
        np.exp(-1), 0.02, 0.0, 0.25, np.full(4, 3.0), fine_spec
    )
    assert result.status == "ok"
    assert result.time == pytest.approx(4 * np.log(13.5), abs=1e-6)


def test_invert_model2_residual_and_monotone(model2_spec):
    b = np.array([0.5, 2.0, -1.0, 1.5])
    times = []
    for v in (0.2, 0.5, 0.8):
        result = simulate.invert_event_time_model2(v, 0.02, 0.1, 0.25, b, model2_spec)
        assert result.status == "ok"
        H = simulate.cumulative_hazard_model2(result.time, 0.02, 0.1, 0.25, b, model2_spec)
        assert H == pytest.approx(-np.log(v), abs=1e-6)
        times.append(result.time)
    assert times[0] > times[1] > times[2]


def test_invert_model2_beyond_horizon(model2_spec):
    result = simulate.invert_event_time_model2(
        0.5, 1e-6, 0.0, 0.01, np.zeros(4), model2_spec, RootConfig(horizon=24.0)
    )
    assert result.status == "beyond_horizon"
    assert result.time == np.inf
    assert not result.failed


def test_invert_model2_failure(model2_spec):
    result = simulate.invert_event_time_model2(
        0.5, 1e-6, 0.0, 0.01, np.zeros(4), model2_spec, RootConfig(t_max=5.0)
    )
    assert result.failed
    assert "t_max=5.0" in result.message


def test_apply_censoring_without_censoring(model1_design):
    model1_design.administrative_time = np.inf
    rng = np.random.default_rng(0)
    for event_time in (0.1, 10.0, 1e6):
        assert simulate.apply_censoring(event_time, model1_design, rng) == (event_time, 1)


def test_apply_censoring_administrative(model1_design):
    rng = np.random.default_rng(0)
    assert simulate.apply_censoring(30.0, model1_design, rng) == (24.0, 0)
    assert simulate.apply_censoring(np.inf, model1_design, rng) == (24.0, 0)


def test_apply_censoring_zero_administrative_time(model1_design):
    model1_design.administrative_time = 0.0
    with pytest.raises(ConfigError):
        simulate.apply_censoring(1.0, model1_design, np.random.default_rng(0))


def test_apply_censoring_independent_fraction(model1_design):
    # competing exponentials, P(censored) = rate / (hazard + rate)
    hazard = 0.02
    model1_design.administrative_time = np.inf
    model1_design.independent_rate = hazard * 0.3 / 0.7
    rng = np.random.default_rng(12)
    censored = 0
    for _ in range(10000):
        event_time = simulate.invert_event_time_model1(rng.random(), hazard, 0.0, 0.0, 0.0)
        censored += 1 - simulate.apply_censoring(event_time, model1_design, rng)[1]
    assert 0.27 <= censored / 10000 <= 0.33


def test_generate_longitudinal_noise_free(model1_spec, model1_truth):
    model1_truth.sigma2 = 0.0
    times, z = simulate.generate_longitudinal(
        [0, 2, 6, 12], 20.0, model1_spec, model1_truth, [1.0, 0.5], [1.0], np.random.default_rng(0)
    )
    assert times.tolist() == [0, 2, 6, 12]
    assert z == pytest.approx([1.0, 2.0, 4.0, 7.0])


def test_generate_longitudinal_truncation(model1_spec, model1_truth):
    rng = np.random.default_rng(0)
    times, z = simulate.generate_longitudinal(
        [0, 2, 6, 12], 1.5, model1_spec, model1_truth, [1.0, 0.5], [1.0], rng
    )
    assert times.tolist() == [0]
    assert z.size == 1
    times, _ = simulate.generate_longitudinal(
        [0, 2, 6, 12], 6.0, model1_spec, model1_truth, [1.0, 0.5], [1.0], rng
    )
    assert times.tolist() == [0, 2, 6]


def test_generate_longitudinal_noise_variance(model1_spec, model1_truth):
    schedule = np.arange(100000) * 0.001
    times, z = simulate.generate_longitudinal(
        schedule, 200.0, model1_spec, model1_truth, [1.0, 0.5], [1.0], np.random.default_rng(3)
    )
    residual = z - (1.0 + 0.5 * times)
    assert residual.var() == pytest.approx(4.0, rel=0.03)


def test_generate_longitudinal_model_ia(model1_truth):
    spec = ModelSpec(kind="Ia", n_covariates=1, longitudinal_covariate=0)
    model1_truth.gamma = 2.0
    model1_truth.sigma2 = 0.0
    _, z = simulate.generate_longitudinal(
        [0, 2], 5.0, spec, model1_truth, [1.0, 0.5], [1.0], np.random.default_rng(0)
    )
    assert z == pytest.approx([3.0, 4.0])


def test_generate_dataset_deterministic(model1_design):
    first = simulate.generate_dataset(model1_design)
    second = simulate.generate_dataset(model1_design)
    assert first.subjects.to_json() == second.subjects.to_json()
    assert first.to_dict() == second.to_dict()

    model1_design.seed = 2025
    third = simulate.generate_dataset(model1_design)
    assert third.subjects.to_json() != first.subjects.to_json()


def test_generate_subject_independent_of_n(model1_design):
    small = simulate.generate_subject(model1_design, 4)
    model1_design.n = 500
    large = simulate.generate_subject(model1_design, 4)
    assert small[0].to_dict() == large[0].to_dict()
    assert np.array_equal(small[1], large[1])


def test_generate_dataset_invariants(model1_design):
    dataset = simulate.generate_dataset(model1_design)
    assert len(dataset.subjects) == 100
    assert dataset.truth.b.shape == (100, 2)
    assert dataset.failures == []
    for i, subject in enumerate(dataset.subjects):
        assert subject.validate() == []
        assert subject.times[0] == 0
        assert np.all(subject.times <= subject.t)
        assert subject.t <= 24.0
        if subject.delta:
            assert subject.t == dataset.event_times[i]
        else:
            assert subject.t == min(24.0, dataset.censor_times[i])
    events = sum(s.delta for s in dataset.subjects)
    assert events > 50


def test_generate_dataset_model1_round_trip(model1_design):
    dataset = simulate.generate_dataset(model1_design)
    truth = dataset.truth
    for i, subject in enumerate(dataset.subjects):
        v = simulate.subject_rng(model1_design.seed, i, "event").random()
        H = model1_cumulative_hazard(
            dataset.event_times[i], truth.lam, subject.x @ truth.beta, truth.alpha, truth.b[i, 1]
        )
        assert H == pytest.approx(-np.log(v), abs=1e-10)


def test_generate_dataset_model2(model2_design):
    dataset = simulate.generate_dataset(model2_design)
    assert len(dataset.subjects) + len(dataset.failures) == 30
    assert dataset.truth.b.shape == (len(dataset.subjects), 4)
    for subject in dataset.subjects:
        assert 0 < subject.t <= 24.0
        assert np.all(subject.times <= subject.t)


def test_generate_dataset_model2_beyond_horizon_is_censored(model2_design):
    model2_design.truth.lam = 1e-9
    model2_design.truth.alpha = 0.0
    dataset = simulate.generate_dataset(model2_design)
    assert dataset.failures == []
    assert all(s.t == 24.0 and s.delta == 0 for s in dataset.subjects)
    assert np.all(np.isinf(dataset.event_times))
    assert dataset.to_dict()["event_times"] == [None] * 30


def test_generate_dataset_rejects_failed_inversions(model2_design):
    model2_design.truth.lam = 1e-9
    model2_design.truth.alpha = 0.0
    model2_design.t_max = 2.0
    with pytest.raises(SimulationError) as exc:
        simulate.generate_dataset(model2_design)
    assert exc.value.failures == 30


@pytest.mark.parametrize(
    "attribute,value,pointer",
    [
        ("n", 0, "/design/n"),
        ("schedule", np.array([1.0, 2.0]), "/design/schedule"),
        ("schedule", np.array([0.0, 2.0, 2.0]), "/design/schedule"),
        ("covariates", [], "/design/covariates"),
        ("covariates", [CovariateLaw("bernoulli", p=1.5)], "/design/covariates/0/p"),
        ("covariates", [CovariateLaw("poisson")], "/design/covariates/0/law"),
        ("independent_rate", -0.1, "/design/censoring/independent_rate"),
        ("t_max", 1.0, "/design/t_max"),
    ],
)
def test_design_validate(model1_design, attribute, value, pointer):
    setattr(model1_design, attribute, value)
    with pytest.raises(ConfigError) as exc:
        model1_design.validate()
    assert exc.value.pointer == pointer


def test_design_validate_truth(model1_design):
    model1_design.truth = ParameterState(
        lam=0.02, beta=[0.05, 0.1], alpha=0.25, mu=[1.2, 0.25], Sigma=np.eye(2), sigma2=4.0
    )
    with pytest.raises(ConfigError) as exc:
        model1_design.validate()
    assert exc.value.pointer == "/truth/beta"


def test_design_serialisation(model1_design):
    d = model1_design.to_dict()
    assert d["censoring"] == {"administrative_time": 24.0, "independent_rate": 0.0}
    back = SimulationDesign.from_dict(d, spec=model1_design.spec, truth=model1_design.truth)
    assert back.to_dict() == d


def km_curve(t, delta):
    order = np.argsort(t, kind="stable")
    t, delta = t[order], delta[order]
    at_risk = t.size - np.arange(t.size)
    survival = np.cumprod(1 - delta / at_risk)
    return t, survival


@pytest.mark.slow
def test_generate_dataset_survival_matches_exponential():
    spec = ModelSpec(kind="I", n_covariates=0)
    truth = ParameterState(
        lam=0.05, beta=[], alpha=0.0, mu=[1.2, 0.25], Sigma=[[2, 3], [3, 5]], sigma2=4.0
    )
    design = SimulationDesign(
        n=10000, spec=spec, truth=truth, schedule=[0, 6], administrative_time=24.0, seed=3
    )
    dataset = simulate.generate_dataset(design)
    t = np.array([s.t for s in dataset.subjects])
    delta = np.array([s.delta for s in dataset.subjects], dtype=float)
    times, survival = km_curve(t, delta)
    assert np.max(np.abs(survival - np.exp(-0.05 * times))) <= 0.02
