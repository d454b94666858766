"""
Shared fixtures for the arcsurv test suite
"""

import numpy as np
import pytest

from arcsurv.models import ModelSpec, ParameterState
from arcsurv.simulate import CovariateLaw, SimulationDesign
from arcsurv.splines import SplineConfig


@pytest.fixture
def model1_spec():
    return ModelSpec(kind="I", n_covariates=1)


@pytest.fixture
def model1_truth():
    return ParameterState(
        lam=0.02,
        beta=[0.05],
        alpha=0.25,
        mu=[1.2, 0.25],
        Sigma=[[2.0, 3.0], [3.0, 5.0]],
        sigma2=4.0,
    )


@pytest.fixture
def model1_design(model1_spec, model1_truth):
    return SimulationDesign(
        n=100,
        spec=model1_spec,
        truth=model1_truth,
        covariates=[CovariateLaw("bernoulli", p=0.5)],
        schedule=[0, 2, 6, 12, 18],
        administrative_time=24.0,
        seed=2024,
    )


@pytest.fixture
def model2_spec():
    return ModelSpec(
        kind="II",
        n_covariates=1,
        spline=SplineConfig(order=3, inner_knots=[12], boundary=(0, 24)),
        quad_points=100,
    )


@pytest.fixture
def model2_truth():
    return ParameterState(
        lam=0.02,
        beta=[0.05],
        alpha=0.1,
        mu=[1.2, 0.25, 1.2, 0.25],
        Sigma=np.array(
            [
                [6.60, 5.24, 5.24, 5.93],
                [5.24, 7.85, 5.80, 6.08],
                [5.24, 5.80, 6.53, 4.57],
                [5.93, 6.08, 4.57, 6.43],
            ]
        ),
        sigma2=4.0,
    )


@pytest.fixture
def model2_design(model2_spec, model2_truth):
    return SimulationDesign(
        n=30,
        spec=model2_spec,
        truth=model2_truth,
        covariates=[CovariateLaw("bernoulli", p=0.5)],
        schedule=[0, 2, 6, 12, 18],
        administrative_time=24.0,
        seed=7,
    )
