"""Adaptive Metropolis-within-Gibbs for the joint models.

One sweep updates, in order: lambda, beta, alpha, gamma (Model Ia), mu,
Sigma, sigma2 and then every b_i. lambda, mu, Sigma and sigma2 have exact
conjugate full conditionals and are drawn directly; the other blocks use
Gaussian random-walk proposals whose log scales are tuned by Robbins-Monro
during burn-in and frozen afterwards.
"""

import logging

import numpy as np

from scipy import linalg, stats

from arcsurv.errors import NumericalError


LOG = logging.getLogger(__name__)

SCALAR_TARGET = 0.44
VECTOR_TARGET = 0.234
ADAPTATION_EXPONENT = 0.6


def acceptance_probability(log_ratio):
    """min(1, exp(log_ratio)), 0 for NaN ratios."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    with np.errstate(over="ignore"):
        prob = np.exp(np.minimum(log_ratio, 0.0))
    return np.where(np.isnan(log_ratio), 0.0, prob)


def metropolis_accept(log_ratio, rng):
    """Accept/reject decision(s) for the given log acceptance ratio(s)."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    u = rng.random(log_ratio.shape)
    return np.log(u) < np.where(np.isnan(log_ratio), -np.inf, log_ratio)


def rw_metropolis(x, log_target, scale, rng, current=None):
    """One Gaussian random-walk Metropolis update.

    Parameters:
        x (numpy.ndarray): Current position.
        log_target (callable): Log density, -inf outside the support.
        scale (float): Proposal standard deviation.
        rng (numpy.random.Generator): Random stream.
        current (float): log_target(x), if already known.

    Returns:
        tuple: (new position, its log density, acceptance probability)
    """
    x = np.asarray(x, dtype=float)
    current = log_target(x) if current is None else current
    proposal = x + scale * rng.standard_normal(x.shape)
    proposed = log_target(proposal)
    log_ratio = proposed - current
    prob = float(acceptance_probability(log_ratio))
    if metropolis_accept(log_ratio, rng):
        return proposal, proposed, prob
    return x, current, prob


def adapt_scales(log_scales, accept, targets, k):
    """Robbins-Monro step log s <- log s + k^-0.6 (acc - target)."""
    return log_scales + k ** -ADAPTATION_EXPONENT * (np.asarray(accept) - np.asarray(targets))


class Adaptation:
    """Proposal scales of the random-walk blocks.

    Attributes:
        log_scales (dict): Block name -> log proposal scale (array for "b").
        targets (dict): Block name -> target acceptance rate.
        iteration (int): Number of adaptation updates applied.
        frozen (bool): Whether adaptation has stopped.
        accept_sums (dict): Summed acceptance probabilities since the last reset.
    """

    def __init__(self, spec, n_subjects, initial_scale=0.1):
        self.log_scales = {
            "beta": np.log(initial_scale),
            "alpha": np.log(initial_scale),
            "b": np.full(n_subjects, np.log(initial_scale)),
        }
        self.targets = {
            "beta": VECTOR_TARGET if spec.n_covariates > 1 else SCALAR_TARGET,
            "alpha": SCALAR_TARGET,
            "b": VECTOR_TARGET,
        }
        if spec.has_gamma:
            self.log_scales["gamma"] = np.log(initial_scale)
            self.targets["gamma"] = SCALAR_TARGET
        self.iteration = 0
        self.frozen = False
        self.accept_sums = {name: 0.0 for name in self.log_scales}
        self.accept_count = 0

    def scale(self, name):
        return np.exp(self.log_scales[name])

    def update(self, accept):
        """Records one sweep's acceptance probabilities and adapts unless frozen."""
        self.accept_count += 1
        for name, prob in accept.items():
            self.accept_sums[name] = self.accept_sums[name] + np.mean(prob)
        if self.frozen:
            return
        self.iteration += 1
        for name, prob in accept.items():
            self.log_scales[name] = adapt_scales(
                self.log_scales[name], prob, self.targets[name], self.iteration
            )

    def acceptance_rates(self):
        count = max(self.accept_count, 1)
        return {name: float(total / count) for name, total in self.accept_sums.items()}

    def reset_rates(self):
        self.accept_sums = {name: 0.0 for name in self.log_scales}
        self.accept_count = 0

    def freeze(self):
        self.frozen = True
        LOG.debug("Froze proposal scales: %s", self.snapshot())

    def snapshot(self):
        return {
            name: np.exp(value).tolist() if np.ndim(value) else float(np.exp(value))
            for name, value in self.log_scales.items()
        }


def draw_lambda(model, state, rng, integrals):
    """Gamma(a + sum delta, r + sum e^{x'beta} I_i) draw of lambda."""
    priors = model.spec.priors
    exposure = np.exp(model.linear_predictor(state)) @ integrals[0]
    shape = priors.lambda_shape + model.delta.sum()
    rate = priors.lambda_rate + exposure
    return stats.gamma.rvs(shape, scale=1.0 / rate, random_state=rng)


def _cholesky(matrix, name):
    """Lower Cholesky factor, NumericalError when matrix is not positive definite."""
    if not np.all(np.isfinite(matrix)):
        raise NumericalError(f"{name} is not finite")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{name} is not positive definite") from None


def draw_mu(state, priors, rng):
    """Multivariate normal draw of mu given b and Sigma."""
    n, k = state.b.shape
    sigma_inv = linalg.cho_solve((_cholesky(state.Sigma, "Sigma"), True), np.eye(k))
    precision = n * sigma_inv + np.eye(k) / priors.mu_sd ** 2
    chol = _cholesky(precision, "Conditional precision of mu")
    mean = linalg.cho_solve((chol, True), sigma_inv @ state.b.sum(axis=0))
    return mean + linalg.solve_triangular(chol.T, rng.standard_normal(k), lower=False)


def draw_sigma(state, priors, rng):
    """Inverse-Wishart draw of Sigma given b and mu."""
    n, k = state.b.shape
    d = state.b - state.mu
    scale = priors.scale(k) + d.T @ d
    _cholesky(scale, "Inverse-Wishart scale")
    draw = stats.invwishart.rvs(df=priors.df(k) + n, scale=scale, random_state=rng)
    draw = np.atleast_2d(draw)
    return 0.5 * (draw + draw.T)


def draw_sigma2(model, state, rng):
    """Inverse-gamma draw of sigma2 given the longitudinal residuals."""
    priors = model.spec.priors
    residual = model.longitudinal_residuals(state)
    shape = priors.sigma2_shape + 0.5 * residual.size
    rate = priors.sigma2_rate + 0.5 * residual @ residual
    return stats.invgamma.rvs(shape, scale=rate, random_state=rng)


def mwg_step(state, model, adaptation, rng):
    """One Metropolis-within-Gibbs sweep.

    Parameters:
        state (ParameterState): Current state, must have a finite posterior.
        model (JointModel): Model bound to the data.
        adaptation (Adaptation): Proposal scales, updated in place.
        rng (numpy.random.Generator): Random stream.

    Returns:
        ParameterState: The new state (state itself is not modified).

    Raises:
        NumericalError: If the current state has a non-finite posterior.
    """
    spec = model.spec
    priors = spec.priors
    state = state.copy()
    accept = {}

    integrals = model.hazard_integrals(state.alpha, state.b, strict=False)
    survival = model.survival_terms(state, integrals, strict=False)
    if not np.all(np.isfinite(survival)):
        raise NumericalError("Current state has a non-finite posterior")

    # lambda
    state.lam = draw_lambda(model, state, rng, integrals)

    # beta
    if spec.n_covariates:
        def log_beta(beta):
            trial = state.copy()
            trial.beta = beta
            return (
                model.survival_terms(trial, integrals, strict=False).sum()
                + stats.norm.logpdf(beta, 0.0, priors.beta_sd).sum()
            )
        state.beta, _, accept["beta"] = rw_metropolis(
            state.beta, log_beta, adaptation.scale("beta"), rng
        )

    # alpha
    def log_alpha(alpha):
        trial = state.copy()
        trial.alpha = float(alpha[0])
        terms = model.survival_terms(trial, strict=False)
        return terms.sum() + stats.norm.logpdf(trial.alpha, 0.0, priors.alpha_sd)

    alpha, _, accept["alpha"] = rw_metropolis(
        np.array([state.alpha]), log_alpha, adaptation.scale("alpha"), rng
    )
    state.alpha = float(alpha[0])

    # gamma
    if spec.has_gamma:
        def log_gamma(gamma):
            trial = state.copy()
            trial.gamma = float(gamma[0])
            return (
                model.longitudinal_terms(trial).sum()
                + stats.norm.logpdf(trial.gamma, 0.0, priors.gamma_sd)
            )
        gamma, _, accept["gamma"] = rw_metropolis(
            np.array([state.gamma]), log_gamma, adaptation.scale("gamma"), rng
        )
        state.gamma = float(gamma[0])

    # conjugate population blocks
    state.mu = draw_mu(state, priors, rng)
    state.Sigma = draw_sigma(state, priors, rng)
    state.sigma2 = draw_sigma2(model, state, rng)

    # random effects, independent across subjects given the population block
    state.b, accept["b"] = update_random_effects(model, state, adaptation, rng)

    adaptation.update(accept)
    return state


def _subject_log_target(model, state, b, L):
    trial = state.copy()
    trial.b = b
    return (
        model.survival_terms(trial, strict=False)
        + model.longitudinal_terms(state, b)
        + model.random_effect_terms(state, b, L)
    )


def update_random_effects(model, state, adaptation, rng):
    """Random-walk update of every b_i, accepted subject by subject.

    Returns:
        tuple: (new b matrix, per-subject acceptance probabilities)
    """
    L = _cholesky(state.Sigma, "Sigma")
    current = _subject_log_target(model, state, state.b, L)
    scales = adaptation.scale("b")
    proposal = state.b + scales[:, None] * rng.standard_normal(state.b.shape)
    proposed = _subject_log_target(model, state, proposal, L)
    log_ratio = proposed - current
    accepted = metropolis_accept(log_ratio, rng)
    b = np.where(accepted[:, None], proposal, state.b)
    return b, acceptance_probability(log_ratio)

