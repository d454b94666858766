"""Hazard, survival and posterior evaluation for Models I, Ia and II.

Model I and Ia use a linear trajectory b0 + b1 s, whose arc length up to t is
t sqrt(1 + b1^2), so the cumulative hazard has a closed form. Model II uses a
B-spline trajectory and integrates the arc length numerically on a fixed grid
per subject. Gradients are exact for that discretised objective.
"""

import logging

import numpy as np

from scipy import integrate, linalg, stats

from arcsurv import quadrature
from arcsurv.errors import ConfigError, DomainError, NumericalError
from arcsurv.models import ParameterState
from arcsurv.splines import basis_derivative_matrix, basis_matrix


LOG = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

# |a| below which expm1(a)/a switches to its series
SERIES_THRESHOLD = 1e-8
_GRAD_SERIES_THRESHOLD = 1e-3
_MAX_EXPONENT = np.log(np.finfo(float).max)


def _expm1_ratio(a):
    """(exp(a) - 1) / a, continuous through a = 0."""
    a = np.asarray(a, dtype=float)
    small = np.abs(a) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, a)
    return np.where(small, 1.0 + 0.5 * a, np.expm1(safe) / safe)


def _expm1_ratio_grad(a):
    """Derivative of (exp(a) - 1) / a with respect to a."""
    a = np.asarray(a, dtype=float)
    small = np.abs(a) < _GRAD_SERIES_THRESHOLD
    safe = np.where(small, 1.0, a)
    series = 0.5 + a / 3.0 + a ** 2 / 8.0 + a ** 3 / 30.0
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / safe ** 2
    return np.where(small, series, exact)


def _check_exponent(exponent, what):
    worst = np.max(exponent) if np.size(exponent) else -np.inf
    if np.isnan(worst) or worst > _MAX_EXPONENT:
        raise NumericalError(f"Hazard exponent overflow: {what}={worst!r}")


def arc_length_model1(b1, t):
    """Arc length t sqrt(1 + b1^2) of a straight line with slope b1."""
    return t * np.hypot(1.0, b1)


def arc_length_model2(b, spline, t, m):
    """Trapezoid arc length of the spline trajectory sum_l b_l B_l on [0, t].

    Raises:
        DomainError: If t lies outside the spline boundary.
    """
    start, end = spline.boundary
    if not start <= t <= end:
        raise DomainError(f"t={t} outside spline domain [{start}, {end}]")
    if t == 0:
        return 0.0
    b = np.asarray(b, dtype=float)

    def slope(s):
        return basis_derivative_matrix(spline, s) @ b

    return quadrature.trapezoid_arc_length(
        quadrature.speed_from_slope(slope), quadrature.Grid(t, m)
    )


def _spline_speed(spec, b):
    b = np.asarray(b, dtype=float)

    def slope(s):
        return basis_derivative_matrix(spec.spline, s) @ b

    return quadrature.speed_from_slope(slope)


def subject_arc_length(spec, b_i, s):
    """G_i(s) for a single subject's random effects."""
    if spec.kind == "II":
        return arc_length_model2(b_i, spec.spline, s, spec.quad_points)
    return arc_length_model1(b_i[1], s)


def _linear_predictor(state, subject):
    if subject.x.size != state.beta.size:
        raise ConfigError(
            f"Subject {subject.id} has {subject.x.size} covariates, beta has {state.beta.size}"
        )
    return float(subject.x @ state.beta)


def log_hazard(spec, state, subject, s, i=0):
    """log lambda + x'beta + alpha G_i(s), using random effect row i of state.b."""
    if not 0 <= s <= subject.t:
        raise DomainError(f"s={s} outside [0, {subject.t}] for subject {subject.id}")
    G = subject_arc_length(spec, state.b[i], s)
    return np.log(state.lam) + _linear_predictor(state, subject) + state.alpha * G


def log_survival(spec, state, subject, s, i=0):
    """-H_i(s), closed form for Model I/Ia, nested quadrature for Model II.

    Raises:
        NumericalError: On exponent overflow, naming the subject and s.
    """
    if s < 0:
        raise DomainError(f"s={s} is negative")
    if s == 0:
        return 0.0
    lp = _linear_predictor(state, subject)
    b_i = state.b[i]
    try:
        if spec.kind == "II":
            H = quadrature.nested_cumulative_hazard(
                quadrature.constant_baseline(state.lam),
                lp,
                state.alpha,
                _spline_speed(spec, b_i),
                quadrature.Grid(s, spec.quad_points),
            )
        else:
            c = np.hypot(1.0, b_i[1])
            a = state.alpha * c * s
            _check_exponent(lp + a, "alpha*G")
            H = float(state.lam * np.exp(lp) * s * _expm1_ratio(a))
    except NumericalError as exc:
        raise NumericalError(f"Subject {subject.id} at s={s}: {exc}") from exc
    return -H


def log_lik_survival(spec, state, subject, i=0):
    """delta log hazard(t) + log survival(t)."""
    value = log_survival(spec, state, subject, subject.t, i=i)
    if subject.delta:
        value += log_hazard(spec, state, subject, subject.t, i=i)
    return value


def longitudinal_mean(spec, state, subject, i=0):
    b_i = state.b[i]
    if spec.kind == "II":
        return basis_matrix(spec.spline, subject.times) @ b_i
    mean = b_i[0] + b_i[1] * subject.times
    if spec.has_gamma:
        mean = mean + state.gamma * subject.x[spec.longitudinal_covariate]
    return mean


def log_lik_longitudinal(spec, state, subject, i=0):
    """Gaussian log density of the subject's measurements."""
    residual = subject.z - longitudinal_mean(spec, state, subject, i=i)
    n = residual.size
    return -0.5 * n * (LOG_2PI + np.log(state.sigma2)) - residual @ residual / (2 * state.sigma2)


def log_prior_random_effects(state, i):
    """Multivariate normal log density of b_i via a Cholesky solve.

    Raises:
        numpy.linalg.LinAlgError: If Sigma is not positive definite.
    """
    L = state.sigma_cholesky()
    if L is None:
        raise np.linalg.LinAlgError("Sigma is not positive definite")
    y = linalg.solve_triangular(L, state.b[i] - state.mu, lower=True)
    k = state.mu.size
    return -0.5 * k * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * y @ y


def log_prior(spec, state):
    """Log prior density of the population parameters, -inf outside the support."""
    priors = spec.priors
    k = spec.n_random
    if not (state.lam > 0 and state.sigma2 > 0) or state.sigma_cholesky() is None:
        return -np.inf
    value = stats.gamma.logpdf(state.lam, priors.lambda_shape, scale=1.0 / priors.lambda_rate)
    value += stats.norm.logpdf(state.beta, 0.0, priors.beta_sd).sum()
    value += stats.norm.logpdf(state.alpha, 0.0, priors.alpha_sd)
    if spec.has_gamma:
        value += stats.norm.logpdf(state.gamma, 0.0, priors.gamma_sd)
    value += stats.norm.logpdf(state.mu, 0.0, priors.mu_sd).sum()
    value += stats.invgamma.logpdf(state.sigma2, priors.sigma2_shape, scale=priors.sigma2_rate)
    value += stats.invwishart.logpdf(state.Sigma, df=priors.df(k), scale=priors.scale(k))
    return float(value)


class ParameterPacker:
    """Maps ParameterState to and from an unconstrained vector.

    Layout: log lambda, beta, alpha, gamma (Model Ia), mu, the lower triangle
    of the Cholesky factor of Sigma in row-major order with log diagonal,
    log sigma2, then b flattened by subject.
    """

    def __init__(self, spec, n_subjects):
        self.spec = spec
        self.n_subjects = n_subjects
        k = spec.n_random
        self.k = k
        self.tril = np.tril_indices(k)
        self.diag_positions = np.flatnonzero(self.tril[0] == self.tril[1])

        sizes = [
            ("log_lambda", 1),
            ("beta", spec.n_covariates),
            ("alpha", 1),
            ("gamma", 1 if spec.has_gamma else 0),
            ("mu", k),
            ("chol", k * (k + 1) // 2),
            ("log_sigma2", 1),
            ("b", n_subjects * k),
        ]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def coordinate_names(self):
        names = ["log_lambda"]
        names.extend(f"beta[{p + 1}]" for p in range(self.spec.n_covariates))
        names.append("alpha")
        if self.spec.has_gamma:
            names.append("gamma")
        names.extend(f"mu[{j + 1}]" for j in range(self.k))
        for r, c in zip(*self.tril):
            names.append(f"log_L[{r + 1},{c + 1}]" if r == c else f"L[{r + 1},{c + 1}]")
        names.append("log_sigma2")
        names.extend(
            f"b[{i + 1},{j + 1}]" for i in range(self.n_subjects) for j in range(self.k)
        )
        return names

    def cholesky(self, theta):
        L = np.zeros((self.k, self.k))
        values = theta[self.slices["chol"]].copy()
        values[self.diag_positions] = np.exp(values[self.diag_positions])
        L[self.tril] = values
        return L

    def pack(self, state):
        theta = np.empty(self.size)
        theta[self.slices["log_lambda"]] = np.log(state.lam)
        theta[self.slices["beta"]] = state.beta
        theta[self.slices["alpha"]] = state.alpha
        if self.spec.has_gamma:
            theta[self.slices["gamma"]] = state.gamma
        theta[self.slices["mu"]] = state.mu
        L = np.linalg.cholesky(state.Sigma)
        values = L[self.tril]
        values[self.diag_positions] = np.log(values[self.diag_positions])
        theta[self.slices["chol"]] = values
        theta[self.slices["log_sigma2"]] = np.log(state.sigma2)
        theta[self.slices["b"]] = state.b.ravel()
        return theta

    def unpack(self, theta):
        L = self.cholesky(theta)
        return ParameterState(
            lam=np.exp(theta[self.slices["log_lambda"]][0]),
            beta=theta[self.slices["beta"]].copy(),
            alpha=theta[self.slices["alpha"]][0],
            gamma=theta[self.slices["gamma"]][0] if self.spec.has_gamma else None,
            mu=theta[self.slices["mu"]].copy(),
            Sigma=L @ L.T,
            sigma2=np.exp(theta[self.slices["log_sigma2"]][0]),
            b=theta[self.slices["b"]].reshape(self.n_subjects, self.k).copy(),
        )

    def log_jacobian(self, theta):
        """log |d constrained / d theta| for lambda, sigma2 and Sigma."""
        k = self.k
        log_diag = theta[self.slices["chol"]][self.diag_positions]
        weights = k - np.arange(k) + 1.0
        return (
            theta[self.slices["log_lambda"]][0]
            + theta[self.slices["log_sigma2"]][0]
            + k * np.log(2.0)
            + weights @ log_diag
        )


class JointModel:
    """A model specification bound to a dataset.

    Precomputes per-subject design arrays so that the posterior and its
    gradient are vectorised over subjects. Per-subject terms are returned in
    subject order and always reduced in that order.

    Attributes:
        spec (ModelSpec): Model specification.
        subjects (SubjectContainer): Data, in analysis order.
        packer (ParameterPacker): Unconstrained parameterisation.
    """

    def __init__(self, spec, subjects):
        spec.validate()
        self.spec = spec
        self.subjects = subjects
        self.n = len(subjects)
        if self.n == 0:
            raise ConfigError("Dataset has no subjects")
        self._check_subjects()

        self.t = np.array([s.t for s in subjects])
        self.delta = np.array([s.delta for s in subjects], dtype=float)
        self.x = np.array([s.x for s in subjects], dtype=float).reshape(self.n, spec.n_covariates)

        self.obs_subject = np.concatenate(
            [np.full(s.n_measurements, i) for i, s in enumerate(subjects)]
        )
        self.obs_time = np.concatenate([s.times for s in subjects])
        self.obs_z = np.concatenate([s.z for s in subjects])
        self.n_obs = np.bincount(self.obs_subject, minlength=self.n)

        if spec.kind == "II":
            self.obs_design = basis_matrix(spec.spline, self.obs_time)
            m = spec.quad_points
            fractions = np.arange(m + 1) / m
            self.grid_nodes = self.t[:, None] * fractions[None, :]
            self.grid_step = self.t / m
            weights = np.ones(m + 1)
            weights[[0, -1]] = 0.5
            self.trap_weights = weights
            self.slope_design = basis_derivative_matrix(
                spec.spline, self.grid_nodes.ravel()
            ).reshape(self.n, m + 1, spec.n_random)
        else:
            self.obs_design = np.column_stack([np.ones_like(self.obs_time), self.obs_time])
        if spec.has_gamma:
            self.obs_covariate = self.x[self.obs_subject, spec.longitudinal_covariate]

        self.packer = ParameterPacker(spec, self.n)

    def _check_subjects(self):
        spec = self.spec
        problems = []
        for subject in self.subjects:
            for problem in subject.validate():
                problems.append(f"subject {subject.id}: {problem}")
            if not subject.t > 0:
                problems.append(f"subject {subject.id}: observed time must be positive")
            if subject.x.size != spec.n_covariates:
                problems.append(
                    f"subject {subject.id}: {subject.x.size} covariates, model expects"
                    f" {spec.n_covariates}"
                )
            if spec.kind == "II" and subject.t > spec.spline.boundary[1]:
                problems.append(
                    f"subject {subject.id}: t={subject.t} beyond spline boundary"
                    f" {spec.spline.boundary[1]}"
                )
        if problems:
            raise ConfigError("Invalid data for model:\n" + "\n".join(problems))

    # Per-subject building blocks

    def linear_predictor(self, state):
        return self.x @ state.beta

    def arc_lengths(self, b):
        """G_i(t_i) for every subject."""
        if self.spec.kind == "II":
            slopes = np.einsum("nkj,nj->nk", self.slope_design, b)
            speed = np.hypot(1.0, slopes)
            G = integrate.cumulative_trapezoid(speed, x=self.grid_nodes, axis=1, initial=0.0)
            return G[:, -1]
        return arc_length_model1(b[:, 1], self.t)

    def hazard_integrals(self, alpha, b, with_gradient=False, strict=True):
        """I_i = int_0^{t_i} exp(alpha G_i(s)) ds, so that H_i = lambda e^{x'beta} I_i.

        With with_gradient, also returns dI/dalpha, dI/db and dG(t)/db. With
        strict=False an overflowing subject gets I_i = inf instead of raising.
        """
        if self.spec.kind == "II":
            return self._spline_integrals(alpha, b, with_gradient, strict)

        b1 = b[:, 1]
        c = np.hypot(1.0, b1)
        a = alpha * c * self.t
        if strict:
            _check_exponent(a, "alpha*G")
        with np.errstate(over="ignore", invalid="ignore"):
            I = self.t * _expm1_ratio(a)
        G = self.t * c
        if not with_gradient:
            return I, G
        dphi = _expm1_ratio_grad(a)
        dI_dalpha = self.t * dphi * c * self.t
        dI_db = np.zeros_like(b)
        dG_db = np.zeros_like(b)
        dI_db[:, 1] = self.t * dphi * alpha * self.t * b1 / c
        dG_db[:, 1] = self.t * b1 / c
        return I, G, dI_dalpha, dI_db, dG_db

    def _spline_integrals(self, alpha, b, with_gradient, strict=True):
        slopes = np.einsum("nkj,nj->nk", self.slope_design, b)
        speed = np.hypot(1.0, slopes)
        G = integrate.cumulative_trapezoid(speed, x=self.grid_nodes, axis=1, initial=0.0)
        if strict:
            _check_exponent(alpha * G, "alpha*G")
        with np.errstate(over="ignore"):
            E = np.exp(alpha * G)
        w = self.trap_weights[None, :] * self.grid_step[:, None]
        e = w * E
        I = e.sum(axis=1)
        G_t = G[:, -1]
        if not with_gradient:
            return I, G_t
        dI_dalpha = (e * G).sum(axis=1)
        # suffix sums S_j = sum_{k > j} e_k
        suffix = np.cumsum(e[:, ::-1], axis=1)[:, ::-1] - e
        omega = 0.5 * e + suffix
        omega[:, 0] = 0.5 * suffix[:, 0]
        u = slopes / speed
        dI_db = alpha * self.grid_step[:, None] * np.einsum(
            "nk,nkj->nj", omega * u, self.slope_design
        )
        dG_db = self.grid_step[:, None] * np.einsum(
            "nk,nkj->nj", self.trap_weights[None, :] * u, self.slope_design
        )
        return I, G_t, dI_dalpha, dI_db, dG_db

    def survival_terms(self, state, integrals=None, strict=True):
        """delta_i log h_i(t_i) - H_i(t_i) for every subject.

        With strict=False, subjects whose hazard overflows get -inf instead of
        raising NumericalError.
        """
        if integrals is None:
            integrals = self.hazard_integrals(state.alpha, state.b, strict=strict)
        I, G = integrals[:2]
        lp = self.linear_predictor(state)
        if strict:
            _check_exponent(lp, "x'beta")
        with np.errstate(over="ignore", invalid="ignore"):
            H = state.lam * np.exp(lp) * I
        return self.delta * (np.log(state.lam) + lp + state.alpha * G) - H

    def longitudinal_residuals(self, state, b=None):
        b = state.b if b is None else b
        mean = np.einsum("nj,nj->n", self.obs_design, b[self.obs_subject])
        if self.spec.has_gamma:
            mean = mean + state.gamma * self.obs_covariate
        return self.obs_z - mean

    def longitudinal_terms(self, state, b=None):
        residual = self.longitudinal_residuals(state, b)
        ssr = np.bincount(self.obs_subject, weights=residual ** 2, minlength=self.n)
        return -0.5 * self.n_obs * (LOG_2PI + np.log(state.sigma2)) - ssr / (2 * state.sigma2)

    def random_effect_terms(self, state, b=None, L=None):
        b = state.b if b is None else b
        L = state.sigma_cholesky() if L is None else L
        y = linalg.solve_triangular(L, (b - state.mu).T, lower=True)
        k = state.mu.size
        return -0.5 * k * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * (y ** 2).sum(axis=0)

    def subject_terms(self, state):
        """(survival, longitudinal, random effect) log terms, one array each."""
        return (
            self.survival_terms(state),
            self.longitudinal_terms(state),
            self.random_effect_terms(state),
        )

    # Whole-posterior quantities

    def log_likelihood(self, state):
        """Conditional log likelihood, including the random effect density."""
        return float(sum(term.sum() for term in self.subject_terms(state)))

    def deviance(self, state):
        return -2.0 * self.log_likelihood(state)

    def log_posterior(self, state):
        """Log posterior density, -inf outside the parameter space."""
        if state.b.shape != (self.n, self.spec.n_random):
            raise ValueError(
                f"Expected random effects of shape {(self.n, self.spec.n_random)},"
                f" got {state.b.shape}"
            )
        prior = log_prior(self.spec, state)
        if not np.isfinite(prior):
            return -np.inf
        try:
            value = self.log_likelihood(state) + prior
        except NumericalError:
            return -np.inf
        return value if np.isfinite(value) else -np.inf

    def log_density(self, theta):
        """Log posterior on the unconstrained scale, Jacobian included."""
        state = self.packer.unpack(theta)
        return self.log_posterior(state) + self.packer.log_jacobian(theta)

    def value_and_grad(self, theta):
        """Unconstrained log density and its gradient.

        Raises:
            NumericalError: If any gradient component is non-finite, naming it.
        """
        spec = self.spec
        priors = spec.priors
        packer = self.packer
        sl = packer.slices
        state = packer.unpack(theta)
        L = packer.cholesky(theta)
        k = packer.k
        grad = np.zeros(packer.size)
        grad_b = np.zeros((self.n, k))

        # survival
        I, G, dI_dalpha, dI_db, dG_db = self.hazard_integrals(
            state.alpha, state.b, with_gradient=True
        )
        lp = self.linear_predictor(state)
        _check_exponent(lp, "x'beta")
        scale = state.lam * np.exp(lp)
        H = scale * I
        surv = self.delta * (np.log(state.lam) + lp + state.alpha * G) - H
        grad[sl["log_lambda"]] = np.sum(self.delta - H)
        grad[sl["beta"]] = self.x.T @ (self.delta - H)
        grad[sl["alpha"]] = np.sum(self.delta * G - scale * dI_dalpha)
        grad_b += (self.delta * state.alpha)[:, None] * dG_db - scale[:, None] * dI_db

        # longitudinal
        residual = self.longitudinal_residuals(state)
        ssr = residual @ residual
        n_total = residual.size
        long_value = -0.5 * n_total * (LOG_2PI + np.log(state.sigma2)) - ssr / (2 * state.sigma2)
        weighted = residual / state.sigma2
        for j in range(k):
            grad_b[:, j] += np.bincount(
                self.obs_subject, weights=self.obs_design[:, j] * weighted, minlength=self.n
            )
        if spec.has_gamma:
            grad[sl["gamma"]] = weighted @ self.obs_covariate
        grad_log_sigma2 = -0.5 * n_total + ssr / (2 * state.sigma2)

        # random effects
        d = state.b - state.mu
        y = linalg.solve_triangular(L, d.T, lower=True)
        re_value = (
            -0.5 * k * LOG_2PI * self.n
            - self.n * np.log(np.diag(L)).sum()
            - 0.5 * (y ** 2).sum()
        )
        z = linalg.solve_triangular(L.T, y, lower=False)
        grad_b -= z.T
        grad_mu = z.sum(axis=1)
        sigma_inv = linalg.cho_solve((L, True), np.eye(k))
        grad_sigma = 0.5 * z @ z.T - 0.5 * self.n * sigma_inv

        # priors
        prior_value = log_prior(spec, state)
        grad[sl["log_lambda"]] += priors.lambda_shape - priors.lambda_rate * state.lam
        grad[sl["beta"]] -= state.beta / priors.beta_sd ** 2
        grad[sl["alpha"]] -= state.alpha / priors.alpha_sd ** 2
        if spec.has_gamma:
            grad[sl["gamma"]] -= state.gamma / priors.gamma_sd ** 2
        grad_mu -= state.mu / priors.mu_sd ** 2
        grad_log_sigma2 += -priors.sigma2_shape + priors.sigma2_rate / state.sigma2
        nu = priors.df(k)
        psi = priors.scale(k)
        grad_sigma += 0.5 * sigma_inv @ psi @ sigma_inv - 0.5 * (nu + k + 1) * sigma_inv

        # chain rule through Sigma = L L^T with log diagonal
        grad_L = np.tril(2.0 * grad_sigma @ L)
        chol_grad = grad_L[packer.tril]
        diag = packer.diag_positions
        chol_grad[diag] = chol_grad[diag] * np.diag(L) + (k - np.arange(k) + 1.0)

        grad[sl["mu"]] = grad_mu
        grad[sl["chol"]] = chol_grad
        grad[sl["log_sigma2"]] = grad_log_sigma2
        grad[sl["b"]] = grad_b.ravel()

        value = surv.sum() + long_value + re_value + prior_value + packer.log_jacobian(theta)
        bad = ~np.isfinite(grad)
        if bad.any():
            name = packer.coordinate_names()[int(np.argmax(bad))]
            raise NumericalError(f"Non-finite gradient component {name}")
        return float(value), grad


def log_posterior(spec, state, data):
    """Log posterior of state given a dataset; -inf for boundary violations."""
    return JointModel(spec, data).log_posterior(state)


def grad_log_posterior(spec, state, data):
    """Gradient of the unconstrained log posterior (Jacobian included) at state.

    Coordinates follow ParameterPacker: log lambda, beta, alpha, gamma, mu,
    Cholesky-log Sigma, log sigma2, b.
    """
    model = JointModel(spec, data)
    return model.value_and_grad(model.packer.pack(state))[1]
