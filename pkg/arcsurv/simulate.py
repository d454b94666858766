"""Simulation of joint longitudinal and survival datasets.

Event times are drawn by inverting the cumulative hazard at -log(v) for
v ~ U(0, 1): in closed form for Model I/Ia and by bracketing plus Brent's method
on the nested cumulative hazard for Model II. Every random quantity is drawn
from a stream keyed by (seed, subject, purpose), so a subject's data do not
depend on the order in which subjects are generated.
"""

import logging

import numpy as np

from scipy import optimize

from arcsurv import quadrature
from arcsurv.errors import ConfigError, NumericalError, SimulationError
from arcsurv.likelihood import _spline_speed, longitudinal_mean
from arcsurv.models import Serialiser, ParameterState, SubjectContainer, SubjectRecord


LOG = logging.getLogger(__name__)

STREAMS = {
    "covariates": 1,
    "effects": 2,
    "event": 3,
    "censor": 4,
    "measure": 5,
}

# largest fraction of subjects allowed to fail event time inversion
MAX_FAILURE_FRACTION = 0.01


def subject_rng(seed, subject, purpose):
    """Independent generator for one subject and one purpose."""
    return np.random.default_rng([int(seed), int(subject), STREAMS[purpose]])


class CovariateLaw:
    """Generator description for one survival covariate.

    Attributes:
        law (str): "bernoulli" or "normal".
        params (dict): p for Bernoulli, mean and sd for normal.
    """

    def __init__(self, law="bernoulli", **params):
        self.law = law
        self.params = params

    def validate(self, pointer):
        if self.law == "bernoulli":
            p = self.params.get("p")
            if p is None or not 0 <= p <= 1:
                raise ConfigError(f"Bernoulli p must lie in [0, 1], got {p}", f"{pointer}/p")
        elif self.law == "normal":
            if self.params.get("sd", 1.0) < 0:
                raise ConfigError("sd must be non-negative", f"{pointer}/sd")
        else:
            raise ConfigError(f"unknown covariate law {self.law!r}", f"{pointer}/law")

    def draw(self, rng):
        if self.law == "bernoulli":
            return float(rng.random() < self.params["p"])
        return float(rng.normal(self.params.get("mean", 0.0), self.params.get("sd", 1.0)))

    def to_dict(self):
        return {"law": self.law, **self.params}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SimulationDesign(Serialiser):
    """Everything needed to generate one dataset.

    Attributes:
        n (int): Number of subjects.
        spec (ModelSpec): Generating model.
        truth (ParameterState): Population parameters (b is ignored).
        covariates (list): One CovariateLaw per survival covariate.
        schedule (numpy.ndarray): Nominal measurement times, starting at 0.
        administrative_time (float): Administrative censoring time.
        independent_rate (float): Rate of independent exponential censoring.
        seed (int): Master seed.
        t_max (float): Cap of the bracketing search during inversion.
    """

    def __init__(
        self,
        n,
        spec,
        truth,
        covariates=None,
        schedule=(0.0,),
        administrative_time=np.inf,
        independent_rate=0.0,
        seed=0,
        t_max=1000.0,
    ):
        self.n = n
        self.spec = spec
        self.truth = truth
        self.covariates = covariates if covariates is not None else []
        self.schedule = np.asarray(schedule, dtype=float)
        self.administrative_time = float(administrative_time)
        self.independent_rate = float(independent_rate)
        self.seed = seed
        self.t_max = float(t_max)

    @property
    def horizon(self):
        """Latest time at which an event can be observed."""
        horizon = min(self.t_max, self.administrative_time)
        if self.spec.kind == "II":
            horizon = min(horizon, self.spec.spline.boundary[1])
        return horizon

    def validate(self):
        spec = self.spec
        spec.validate()
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("must be a positive integer", "/design/n")
        if len(self.covariates) != spec.n_covariates:
            raise ConfigError(
                f"expected {spec.n_covariates} covariate laws, got {len(self.covariates)}",
                "/design/covariates",
            )
        for j, law in enumerate(self.covariates):
            law.validate(f"/design/covariates/{j}")
        if self.schedule.size == 0 or self.schedule[0] != 0:
            raise ConfigError("schedule must start with the baseline time 0", "/design/schedule")
        if np.any(np.diff(self.schedule) <= 0):
            raise ConfigError("schedule must be strictly increasing", "/design/schedule")
        if not self.administrative_time > 0:
            raise ConfigError(
                "must be positive", "/design/censoring/administrative_time"
            )
        if not self.independent_rate >= 0:
            raise ConfigError("must be non-negative", "/design/censoring/independent_rate")
        if not self.t_max > 1:
            raise ConfigError("must exceed 1", "/design/t_max")
        if spec.kind == "II" and self.schedule[-1] > spec.spline.boundary[1]:
            raise ConfigError(
                "measurement times must lie inside the spline boundary", "/design/schedule"
            )

        truth = self.truth
        truth.check()
        if truth.beta.size != spec.n_covariates:
            raise ConfigError(f"expected {spec.n_covariates} values", "/truth/beta")
        if truth.mu.size != spec.n_random:
            raise ConfigError(f"expected {spec.n_random} values", "/truth/mu")
        if spec.has_gamma and truth.gamma is None:
            raise ConfigError("Model Ia needs gamma", "/truth/gamma")

    def to_dict(self):
        return {
            "n": self.n,
            "covariates": [law.to_dict() for law in self.covariates],
            "schedule": self.schedule.tolist(),
            "censoring": {
                "administrative_time": (
                    None if np.isinf(self.administrative_time) else self.administrative_time
                ),
                "independent_rate": self.independent_rate,
            },
            "seed": self.seed,
            "t_max": self.t_max,
        }

    @classmethod
    def from_dict(cls, d, spec=None, truth=None):
        censoring = d.get("censoring", {})
        admin = censoring.get("administrative_time")
        return cls(
            n=d["n"],
            spec=spec,
            truth=truth,
            covariates=[CovariateLaw.from_dict(c) for c in d.get("covariates", [])],
            schedule=d.get("schedule", [0.0]),
            administrative_time=np.inf if admin is None else admin,
            independent_rate=censoring.get("independent_rate", 0.0),
            seed=d.get("seed", 0),
            t_max=d.get("t_max", 1000.0),
        )


class InversionResult:
    """Outcome of inverting the cumulative hazard.

    Attributes:
        time (float): Event time, or inf when the event lies beyond the horizon.
        status (str): "ok", "beyond_horizon" or "failed".
        message (str): Why inversion failed, if it did.
    """

    def __init__(self, time, status="ok", message=None):
        self.time = time
        self.status = status
        self.message = message

    def __repr__(self):
        return f"InversionResult(time={self.time!r}, status={self.status!r})"

    @property
    def failed(self):
        return self.status == "failed"


class RootConfig:
    """Bracketing and root-finding settings for Model II inversion.

    Attributes:
        t_max (float): Cap of the doubling search.
        horizon (float): Follow-up horizon; events after it are censored.
        tol (float): Absolute root tolerance on t.
    """

    def __init__(self, t_max=1000.0, horizon=None, tol=1e-8):
        self.t_max = t_max
        self.horizon = t_max if horizon is None else min(horizon, t_max)
        self.tol = tol


def draw_random_effects(design, rng, n=None, cholesky=None):
    """Draws b_i = mu + L eta for n subjects (design.n by default).

    Parameters:
        cholesky (numpy.ndarray): Override of the Cholesky factor of Sigma.

    Raises:
        ConfigError: If Sigma is not positive definite.
    """
    truth = design.truth
    n = design.n if n is None else n
    if cholesky is None:
        cholesky = truth.sigma_cholesky()
        if cholesky is None:
            raise ConfigError("Sigma is not positive definite", "/truth/Sigma")
    eta = rng.standard_normal((n, truth.mu.size))
    return truth.mu + eta @ np.asarray(cholesky).T


def invert_event_time_model1(v, lam, linpred, alpha, b1):
    """Closed-form inverse of the Model I cumulative hazard at -log(v).

    Returns inf when the cumulative hazard is bounded below -log(v), which
    can only happen for negative alpha.
    """
    target = -np.log(v) / (lam * np.exp(linpred))
    rate = alpha * np.hypot(1.0, b1)
    if abs(rate) < 1e-10:
        return target
    argument = rate * target
    if argument <= -1:
        return np.inf
    return np.log1p(argument) / rate


def cumulative_hazard_model2(t, lam, linpred, alpha, b, spec):
    if t == 0:
        return 0.0
    return quadrature.nested_cumulative_hazard(
        quadrature.constant_baseline(lam),
        linpred,
        alpha,
        _spline_speed(spec, b),
        quadrature.Grid(t, spec.quad_points),
    )


def invert_event_time_model2(v, lam, linpred, alpha, b, spec, root_cfg=None):
    """Solves H(t) = -log(v) for the Model II trajectory with coefficients b.

    The upper bracket doubles from t = 1 until H exceeds the target, capped at
    the follow-up horizon, then brentq solves within the bracket to root_cfg.tol.

    Returns:
        InversionResult: status "beyond_horizon" when H(horizon) is still
            below the target and the horizon is below t_max, "failed" when no
            bracket exists below t_max or H is not finite.
    """
    root_cfg = root_cfg if root_cfg else RootConfig(horizon=spec.spline.boundary[1])
    target = -np.log(v)

    def excess(t):
        return cumulative_hazard_model2(t, lam, linpred, alpha, b, spec) - target

    try:
        upper = min(1.0, root_cfg.horizon)
        while excess(upper) < 0:
            if upper >= root_cfg.horizon:
                if root_cfg.horizon < root_cfg.t_max:
                    return InversionResult(np.inf, "beyond_horizon")
                return InversionResult(
                    np.nan, "failed", f"no bracket below t_max={root_cfg.t_max}"
                )
            upper = min(2.0 * upper, root_cfg.horizon)
        lower = 0.0 if upper <= 1.0 else upper / 2.0
        root = optimize.brentq(excess, lower, upper, xtol=root_cfg.tol)
    except (NumericalError, ValueError) as exc:
        return InversionResult(np.nan, "failed", str(exc))
    return InversionResult(root)


def draw_censoring_time(design, rng):
    """min(administrative time, Exp(independent_rate)), inf if neither applies."""
    if not design.administrative_time > 0:
        raise ConfigError("must be positive", "/design/censoring/administrative_time")
    censor_time = design.administrative_time
    if design.independent_rate > 0:
        censor_time = min(censor_time, rng.exponential(1.0 / design.independent_rate))
    return censor_time


def apply_censoring(event_time, design, rng):
    """Returns (observed time, delta) after administrative and independent censoring."""
    censor_time = draw_censoring_time(design, rng)
    if event_time <= censor_time:
        return event_time, 1
    return censor_time, 0


def generate_longitudinal(schedule, t, spec, truth, b_i, x_i, rng):
    """Noisy measurements at the schedule times up to t.

    The baseline time 0 is always kept.

    Returns:
        tuple: (times, z) arrays.
    """
    schedule = np.asarray(schedule, dtype=float)
    keep = schedule <= t
    keep[0] = True
    times = schedule[keep]
    state = ParameterState(
        lam=truth.lam,
        beta=truth.beta,
        alpha=truth.alpha,
        gamma=truth.gamma,
        mu=truth.mu,
        Sigma=truth.Sigma,
        sigma2=truth.sigma2,
        b=np.atleast_2d(b_i),
    )
    subject = SubjectRecord("_", t, 0, x=x_i, times=times, z=np.zeros_like(times))
    mean = longitudinal_mean(spec, state, subject)
    noise = rng.standard_normal(times.size) * np.sqrt(truth.sigma2)
    return times, mean + noise


class SimulatedDataset(Serialiser):
    """A simulated dataset with its latent truth.

    Attributes:
        subjects (SubjectContainer): Observable data.
        truth (ParameterState): Generating population parameters, with the
            realised random effects in b.
        event_times (numpy.ndarray): Latent event times (inf if beyond horizon).
        censor_times (numpy.ndarray): Latent censoring times.
        failures (list): Ids of subjects whose inversion failed.
    """

    def __init__(self, subjects, truth, event_times, censor_times, failures=None):
        self.subjects = subjects
        self.truth = truth
        self.event_times = np.asarray(event_times, dtype=float)
        self.censor_times = np.asarray(censor_times, dtype=float)
        self.failures = failures if failures else []

    def to_dict(self):
        def finite(values):
            return [None if not np.isfinite(v) else float(v) for v in values]
        return {
            "truth": self.truth.to_dict(),
            "event_times": finite(self.event_times),
            "censor_times": finite(self.censor_times),
            "failures": self.failures,
        }


def generate_subject(design, index):
    """Generates subject `index`.

    Returns:
        tuple: (SubjectRecord or None on inversion failure, b_i, event time,
            censor time, InversionResult).
    """
    spec = design.spec
    truth = design.truth
    seed = design.seed
    x = np.array(
        [law.draw(subject_rng(seed, index, "covariates")) for law in design.covariates]
    ) if design.covariates else np.zeros(0)
    b_i = draw_random_effects(design, subject_rng(seed, index, "effects"), n=1)[0]
    linpred = float(x @ truth.beta)

    event_rng = subject_rng(seed, index, "event")
    v = event_rng.random()
    while v == 0.0:
        v = event_rng.random()
    if spec.kind == "II":
        root_cfg = RootConfig(t_max=design.t_max, horizon=design.horizon)
        result = invert_event_time_model2(
            v, truth.lam, linpred, truth.alpha, b_i, spec, root_cfg
        )
    else:
        result = InversionResult(
            invert_event_time_model1(v, truth.lam, linpred, truth.alpha, b_i[1])
        )

    # same keyed stream, so the latent censoring time matches the one applied
    censor_time = draw_censoring_time(design, subject_rng(seed, index, "censor"))
    if result.failed:
        return None, b_i, result.time, censor_time, result

    t, delta = apply_censoring(result.time, design, subject_rng(seed, index, "censor"))
    if t > design.horizon:
        t, delta = design.horizon, 0
    times, z = generate_longitudinal(
        design.schedule, t, spec, truth, b_i, x, subject_rng(seed, index, "measure")
    )
    subject = SubjectRecord(f"{index + 1}", t, delta, x=x, times=times, z=z)
    return subject, b_i, result.time, censor_time, result


def generate_dataset(design):
    """Generates a full dataset under a design.

    Raises:
        SimulationError: If more than 1% of subjects fail inversion.
    """
    design.validate()
    subjects = SubjectContainer()
    effects, event_times, censor_times, failures = [], [], [], []
    for index in range(design.n):
        subject, b_i, event_time, censor_time, result = generate_subject(design, index)
        event_times.append(event_time)
        censor_times.append(censor_time)
        if subject is None:
            LOG.warning(
                "Inversion failed for subject %d: %s", index + 1, result.message or "no event"
            )
            failures.append(f"{index + 1}")
            continue
        subjects.append(subject)
        effects.append(b_i)

    if len(failures) > MAX_FAILURE_FRACTION * design.n:
        raise SimulationError(len(failures), design.n)

    truth = design.truth.copy()
    truth.b = np.array(effects).reshape(len(effects), design.spec.n_random)
    events = sum(s.delta for s in subjects)
    LOG.info(
        "Simulated %d subjects, %d events (%.1f%%)",
        len(subjects), events, 100.0 * events / max(len(subjects), 1),
    )
    return SimulatedDataset(subjects, truth, event_times, censor_times, failures)
