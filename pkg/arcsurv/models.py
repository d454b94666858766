import json
import logging

from collections import UserList

import numpy as np

from arcsurv.errors import ConfigError
from arcsurv.splines import SplineConfig


LOG = logging.getLogger(__name__)

MODEL_KINDS = ("I", "Ia", "II")


class Serialiser:
    def to_dict(self):
        raise NotImplementedError

    @classmethod
    def from_dict(cls, d):
        raise NotImplementedError

    def to_json(self, fp=None, **kwargs):
        if fp:
            json.dump(self.to_dict(), fp, indent=2, **kwargs)
        else:
            return json.dumps(self.to_dict(), indent=2, **kwargs)

    @classmethod
    def from_json(cls, js, **kwargs):
        if isinstance(js, str):
            d = json.loads(js, **kwargs)
        else:
            d = json.load(js, **kwargs)
        return cls.from_dict(d)


def _as_list(array):
    return None if array is None else np.asarray(array, dtype=float).tolist()


class SubjectRecord(Serialiser):
    """One subject's survival outcome, covariates and longitudinal measurements.

    Attributes:
        id (str): Subject identifier.
        t (float): Observed time, min(event time, censoring time).
        delta (int): 1 if the event was observed, 0 if censored.
        x (numpy.ndarray): Survival covariates, length P.
        times (numpy.ndarray): Sorted measurement times.
        z (numpy.ndarray): Longitudinal values observed at `times`.
    """

    def __init__(self, id, t, delta, x=None, times=None, z=None):
        self.id = str(id)
        self.t = float(t)
        self.delta = int(delta)
        self.x = np.asarray(x if x is not None else [], dtype=float)
        self.times = np.asarray(times if times is not None else [], dtype=float)
        self.z = np.asarray(z if z is not None else [], dtype=float)

    def __repr__(self):
        return (
            f"SubjectRecord(id={self.id!r}, t={self.t}, delta={self.delta},"
            f" n={self.n_measurements})"
        )

    @property
    def n_measurements(self):
        return self.times.size

    def validate(self, tolerance=1e-8):
        """Returns a list of invariant violations, empty if the record is valid."""
        problems = []
        if not self.t >= 0:
            problems.append(f"observed time t={self.t} is negative")
        if self.delta not in (0, 1):
            problems.append(f"delta={self.delta} is not 0 or 1")
        if self.times.size == 0:
            problems.append("no longitudinal measurements")
        if self.times.size != self.z.size:
            problems.append("times and z differ in length")
        if np.any(self.times < 0):
            problems.append("negative measurement time")
        if np.any(np.diff(self.times) < 0):
            problems.append("measurement times are not sorted")
        if np.any(self.times > self.t + tolerance):
            problems.append(f"measurement after observed time t={self.t}")
        return problems

    def to_dict(self):
        return {
            "id": self.id,
            "t": self.t,
            "delta": self.delta,
            "x": _as_list(self.x),
            "times": _as_list(self.times),
            "z": _as_list(self.z),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SubjectContainer(UserList, Serialiser):
    """Container for SubjectRecord objects, in analysis order."""

    def __str__(self):
        return "\n".join(str(subject) for subject in self)

    def append(self, item):
        if not isinstance(item, SubjectRecord):
            raise TypeError("Item is not a SubjectRecord object")
        super().append(item)

    def extend(self, other):
        if any(not isinstance(item, SubjectRecord) for item in other):
            raise TypeError("Expected list of SubjectRecord objects")
        super().extend(other)

    def get(self, id):
        for subject in self:
            if subject.id == id:
                return subject
        raise KeyError(f"No subject with id {id!r}")

    @property
    def ids(self):
        return [subject.id for subject in self]

    @property
    def n_covariates(self):
        return self[0].x.size if self else 0

    def to_dict(self):
        return [subject.to_dict() for subject in self]

    @classmethod
    def from_dict(cls, lst):
        return cls(SubjectRecord.from_dict(d) for d in lst)


class PriorSpec(Serialiser):
    """Prior hyperparameters.

    Attributes:
        lambda_shape, lambda_rate (float): Gamma prior on the baseline hazard.
        beta_sd, alpha_sd, gamma_sd, mu_sd (float): Scales of zero-mean normal priors.
        sigma2_shape, sigma2_rate (float): Inverse-gamma prior on sigma2.
        wishart_df (float): Inverse-Wishart degrees of freedom; None means K_re + 1.
        wishart_scale (numpy.ndarray): Inverse-Wishart scale; None means identity.
    """

    def __init__(
        self,
        lambda_shape=0.01,
        lambda_rate=0.01,
        beta_sd=10.0,
        alpha_sd=10.0,
        gamma_sd=10.0,
        mu_sd=10.0,
        sigma2_shape=0.01,
        sigma2_rate=0.01,
        wishart_df=None,
        wishart_scale=None,
    ):
        self.lambda_shape = lambda_shape
        self.lambda_rate = lambda_rate
        self.beta_sd = beta_sd
        self.alpha_sd = alpha_sd
        self.gamma_sd = gamma_sd
        self.mu_sd = mu_sd
        self.sigma2_shape = sigma2_shape
        self.sigma2_rate = sigma2_rate
        self.wishart_df = wishart_df
        self.wishart_scale = (
            None if wishart_scale is None else np.asarray(wishart_scale, dtype=float)
        )

    def df(self, dim):
        return dim + 1.0 if self.wishart_df is None else float(self.wishart_df)

    def scale(self, dim):
        if self.wishart_scale is None:
            return np.eye(dim)
        return self.wishart_scale

    def validate(self, dim):
        for name in (
            "lambda_shape", "lambda_rate", "beta_sd", "alpha_sd", "gamma_sd",
            "mu_sd", "sigma2_shape", "sigma2_rate",
        ):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0):
                raise ConfigError(f"must be a positive number, got {value!r}", f"/model/priors/{name}")
        if not self.df(dim) > dim - 1:
            raise ConfigError(
                f"must exceed dimension - 1 = {dim - 1}", "/model/priors/wishart_df"
            )
        scale = self.scale(dim)
        if scale.shape != (dim, dim) or not np.allclose(scale, scale.T):
            raise ConfigError(
                f"must be a symmetric {dim}x{dim} matrix", "/model/priors/wishart_scale"
            )
        try:
            np.linalg.cholesky(scale)
        except np.linalg.LinAlgError:
            raise ConfigError("is not positive definite", "/model/priors/wishart_scale")

    def to_dict(self):
        return {
            "lambda_shape": self.lambda_shape,
            "lambda_rate": self.lambda_rate,
            "beta_sd": self.beta_sd,
            "alpha_sd": self.alpha_sd,
            "gamma_sd": self.gamma_sd,
            "mu_sd": self.mu_sd,
            "sigma2_shape": self.sigma2_shape,
            "sigma2_rate": self.sigma2_rate,
            "wishart_df": self.wishart_df,
            "wishart_scale": _as_list(self.wishart_scale),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelSpec(Serialiser):
    """Which joint model to fit and how to evaluate it.

    Attributes:
        kind (str): One of "I", "Ia", "II".
        n_covariates (int): Number of survival covariates P.
        longitudinal_covariate (int): Column of x entering the longitudinal
            mean with coefficient gamma (Model Ia only).
        spline (SplineConfig): Trajectory basis (Model II only).
        priors (PriorSpec): Prior hyperparameters.
        quad_points (int): Quadrature sub-intervals per subject.
    """

    def __init__(
        self,
        kind="I",
        n_covariates=1,
        longitudinal_covariate=None,
        spline=None,
        priors=None,
        quad_points=200,
    ):
        self.kind = kind
        self.n_covariates = n_covariates
        self.longitudinal_covariate = longitudinal_covariate
        self.spline = spline
        self.priors = priors if priors else PriorSpec()
        self.quad_points = quad_points

    def __repr__(self):
        return f"ModelSpec(kind={self.kind!r}, n_covariates={self.n_covariates})"

    @property
    def n_random(self):
        """Dimension of each subject's random effect vector."""
        return self.spline.n_basis if self.kind == "II" else 2

    @property
    def has_gamma(self):
        return self.kind == "Ia"

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"expected one of {MODEL_KINDS}, got {self.kind!r}", "/model/kind")
        if not isinstance(self.n_covariates, int) or self.n_covariates < 0:
            raise ConfigError("must be a non-negative integer", "/model/n_covariates")
        if self.kind == "Ia":
            index = self.longitudinal_covariate
            if not isinstance(index, int) or not 0 <= index < self.n_covariates:
                raise ConfigError(
                    f"Model Ia needs a covariate column in [0, {self.n_covariates})",
                    "/model/longitudinal_covariate",
                )
        elif self.longitudinal_covariate is not None:
            raise ConfigError("only used by Model Ia", "/model/longitudinal_covariate")
        if self.kind == "II":
            if self.spline is None:
                raise ConfigError("Model II needs a spline configuration", "/model/spline")
            try:
                self.spline.validate()
            except ConfigError as exc:
                raise ConfigError(str(exc), "/model/spline") from exc
        if not isinstance(self.quad_points, int) or self.quad_points < 1:
            raise ConfigError("must be a positive integer", "/model/quad_points")
        self.priors.validate(self.n_random)

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_covariates": self.n_covariates,
            "longitudinal_covariate": self.longitudinal_covariate,
            "spline": self.spline.to_dict() if self.spline else None,
            "priors": self.priors.to_dict(),
            "quad_points": self.quad_points,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("spline"):
            d["spline"] = SplineConfig.from_dict(d["spline"])
        if d.get("priors") is not None:
            d["priors"] = PriorSpec.from_dict(d["priors"])
        return cls(**d)


class ParameterState(Serialiser):
    """A point in the joint parameter space.

    Attributes:
        lam (float): Constant baseline hazard lambda > 0.
        beta (numpy.ndarray): Survival coefficients, length P.
        alpha (float): Association between arc length and log hazard.
        gamma (float): Longitudinal covariate coefficient (Model Ia), else None.
        mu (numpy.ndarray): Random effect mean, length K_re.
        Sigma (numpy.ndarray): Random effect covariance, K_re x K_re.
        sigma2 (float): Measurement error variance.
        b (numpy.ndarray): Random effects, n x K_re (may be empty for a
            population-only state such as a simulation truth).
    """

    def __init__(
        self,
        lam,
        beta,
        alpha,
        mu,
        Sigma,
        sigma2,
        gamma=None,
        b=None,
    ):
        self.lam = float(lam)
        self.beta = np.atleast_1d(np.asarray(beta, dtype=float))
        self.alpha = float(alpha)
        self.gamma = None if gamma is None else float(gamma)
        self.mu = np.asarray(mu, dtype=float)
        self.Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        self.sigma2 = float(sigma2)
        self.b = (
            np.zeros((0, self.mu.size)) if b is None else np.atleast_2d(np.asarray(b, dtype=float))
        )

    def __repr__(self):
        return (
            f"ParameterState(lam={self.lam}, beta={self.beta}, alpha={self.alpha},"
            f" gamma={self.gamma}, mu={self.mu}, sigma2={self.sigma2})"
        )

    def copy(self):
        return ParameterState(
            lam=self.lam,
            beta=self.beta.copy(),
            alpha=self.alpha,
            gamma=self.gamma,
            mu=self.mu.copy(),
            Sigma=self.Sigma.copy(),
            sigma2=self.sigma2,
            b=self.b.copy(),
        )

    def sigma_cholesky(self):
        """Lower Cholesky factor of Sigma, or None if it is not positive definite."""
        if not np.all(np.isfinite(self.Sigma)) or not np.allclose(self.Sigma, self.Sigma.T):
            return None
        try:
            return np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError:
            return None

    def is_valid(self):
        """Whether the state satisfies every ParameterState invariant."""
        scalars = [self.lam, self.alpha, self.sigma2]
        if self.gamma is not None:
            scalars.append(self.gamma)
        finite = all(np.isfinite(scalars)) and all(
            np.all(np.isfinite(a)) for a in (self.beta, self.mu, self.b)
        )
        return (
            finite
            and self.lam > 0
            and self.sigma2 > 0
            and self.sigma_cholesky() is not None
        )

    def check(self, pointer="/truth"):
        """Raises ConfigError naming the first violated invariant."""
        if not self.lam > 0:
            raise ConfigError(f"must be positive, got {self.lam}", f"{pointer}/lambda")
        if not self.sigma2 > 0:
            raise ConfigError(f"must be positive, got {self.sigma2}", f"{pointer}/sigma2")
        if self.Sigma.shape != (self.mu.size, self.mu.size):
            raise ConfigError(
                f"must be {self.mu.size}x{self.mu.size} to match mu", f"{pointer}/Sigma"
            )
        if self.sigma_cholesky() is None:
            raise ConfigError("Sigma is not symmetric positive definite", f"{pointer}/Sigma")

    def population_values(self, spec):
        """Population parameters in reporting order, matching population_names."""
        values = [self.lam, *self.beta, self.alpha]
        if spec.has_gamma:
            values.append(self.gamma)
        values.extend(self.mu)
        rows, cols = np.tril_indices(self.mu.size)
        values.extend(self.Sigma[rows, cols])
        values.append(self.sigma2)
        return np.array(values, dtype=float)

    def to_dict(self):
        return {
            "lambda": self.lam,
            "beta": _as_list(self.beta),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "mu": _as_list(self.mu),
            "Sigma": _as_list(self.Sigma),
            "sigma2": self.sigma2,
            "b": _as_list(self.b),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lam"] = d.pop("lambda")
        b = d.pop("b", None)
        state = cls(**d)
        if b:
            state.b = np.atleast_2d(np.asarray(b, dtype=float))
        return state


def population_names(spec):
    """Names of the population parameters in reporting order."""
    names = ["lambda"]
    names.extend(f"beta[{p + 1}]" for p in range(spec.n_covariates))
    names.append("alpha")
    if spec.has_gamma:
        names.append("gamma")
    k = spec.n_random
    names.extend(f"mu[{j + 1}]" for j in range(k))
    rows, cols = np.tril_indices(k)
    names.extend(f"Sigma[{r + 1},{c + 1}]" for r, c in zip(rows, cols))
    names.append("sigma2")
    return names
