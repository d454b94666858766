"""Run Markov chains for a joint model and collect their draws.

Model I and Ia are usually sampled with Metropolis-within-Gibbs, Model II
with NUTS, though either algorithm works for any model. Every chain has its
own random stream derived from the master seed and the chain index, so
results do not depend on whether chains run in parallel.
"""

import json
import logging
import multiprocessing

import numpy as np

from arcsurv import gibbs, nuts, settings
from arcsurv.errors import ConfigError, InitialisationError, NumericalError
from arcsurv.likelihood import JointModel
from arcsurv.models import ParameterState, Serialiser, population_names


LOG = logging.getLogger(__name__)

ALGORITHMS = ("MwG", "NUTS")
INIT_ATTEMPTS = 100
JITTER = 0.1


def load_presets():
    with open(settings.PRESET_FILE) as fp:
        return json.load(fp)


class SamplerConfig(Serialiser):
    """Chain settings.

    Attributes:
        algorithm (str): "MwG" or "NUTS".
        chains (int): Number of independent chains.
        iterations (int): Iterations per chain, burn-in included.
        burn_in (int): Leading iterations used for adaptation and discarded.
        thin (int): Keep every thin-th post burn-in iteration.
        seed (int): Master seed.
        target_accept (float): NUTS dual averaging target.
        max_tree_depth (int): NUTS depth cap.
        step_size_adapt_iters (int): Iterations of step size adaptation;
            None means the whole burn-in.
        threads (int): Worker processes for running chains.
    """

    def __init__(
        self,
        algorithm="MwG",
        chains=2,
        iterations=2000,
        burn_in=1000,
        thin=1,
        seed=0,
        target_accept=0.8,
        max_tree_depth=10,
        step_size_adapt_iters=None,
        threads=1,
    ):
        self.algorithm = algorithm
        self.chains = chains
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.seed = seed
        self.target_accept = target_accept
        self.max_tree_depth = max_tree_depth
        self.step_size_adapt_iters = step_size_adapt_iters
        self.threads = threads

    def __repr__(self):
        return (
            f"SamplerConfig(algorithm={self.algorithm!r}, chains={self.chains},"
            f" iterations={self.iterations}, burn_in={self.burn_in}, thin={self.thin})"
        )

    @classmethod
    def from_preset(cls, name, **overrides):
        presets = load_presets()
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(presets)}")
        values = dict(presets[name])
        values.update(overrides)
        return cls(**values)

    @property
    def retained(self):
        """Retained draws per chain."""
        return (self.iterations - self.burn_in) // self.thin

    def is_retained(self, iteration):
        return iteration >= self.burn_in and (iteration - self.burn_in + 1) % self.thin == 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"expected one of {ALGORITHMS}", "/sampler/algorithm")
        for name in ("chains", "iterations", "thin", "threads", "max_tree_depth"):
            value = getattr(self, name)
            minimum = 0 if name == "max_tree_depth" else 1
            if not isinstance(value, int) or value < minimum:
                raise ConfigError(f"must be an integer >= {minimum}", f"/sampler/{name}")
        if not isinstance(self.burn_in, int) or not 0 <= self.burn_in < self.iterations:
            raise ConfigError("must satisfy 0 <= burn_in < iterations", "/sampler/burn_in")
        if self.retained < 1:
            raise ConfigError("no draws retained after burn-in and thinning", "/sampler/thin")
        if not 0 < self.target_accept < 1:
            raise ConfigError("must lie in (0, 1)", "/sampler/target_accept")
        if self.step_size_adapt_iters is not None and (
            not isinstance(self.step_size_adapt_iters, int) or self.step_size_adapt_iters < 1
        ):
            raise ConfigError("must be a positive integer", "/sampler/step_size_adapt_iters")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("must be a 64-bit non-negative integer", "/sampler/seed")

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "chains": self.chains,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "seed": self.seed,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "step_size_adapt_iters": self.step_size_adapt_iters,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def chain_rng(seed, chain):
    return np.random.default_rng(np.random.SeedSequence([seed, chain]))


def least_squares_start(model):
    """Deterministic starting state from per-subject least squares.

    Each subject's random effects are a ridge fit shrunk toward the pooled
    fit, so subjects with fewer measurements than coefficients still get a
    unique solution.
    """
    spec = model.spec
    k = spec.n_random
    X = model.obs_design
    pooled, *_ = np.linalg.lstsq(X, model.obs_z, rcond=None)
    ridge = 1e-2 * np.eye(k)
    b = np.empty((model.n, k))
    for i in range(model.n):
        rows = model.obs_subject == i
        Xi = X[rows]
        b[i] = np.linalg.solve(Xi.T @ Xi + ridge, Xi.T @ model.obs_z[rows] + ridge @ pooled)

    mu = b.mean(axis=0)
    if model.n > k:
        Sigma = np.atleast_2d(np.cov(b, rowvar=False))
    else:
        Sigma = np.eye(k)
    Sigma = Sigma + 0.1 * max(np.trace(Sigma) / k, 1e-3) * np.eye(k)

    residual = model.obs_z - np.einsum("nj,nj->n", X, b[model.obs_subject])
    sigma2 = max(float(np.mean(residual ** 2)), 1e-3)
    events = model.delta.sum()
    lam = max(events, 0.5) / model.t.sum()

    return ParameterState(
        lam=lam,
        beta=np.zeros(spec.n_covariates),
        alpha=0.0,
        gamma=0.0 if spec.has_gamma else None,
        mu=mu,
        Sigma=Sigma,
        sigma2=sigma2,
        b=b,
    )


def jitter_state(state, rng, scale=JITTER):
    """Overdispersed copy of state: relative noise, additive for zero values."""

    def perturb(value):
        value = np.asarray(value, dtype=float)
        noise = scale * rng.standard_normal(value.shape)
        return np.where(value == 0, noise, value * (1.0 + noise))

    state = state.copy()
    state.lam = state.lam * np.exp(scale * rng.standard_normal())
    state.sigma2 = state.sigma2 * np.exp(scale * rng.standard_normal())
    state.Sigma = state.Sigma * np.exp(scale * rng.standard_normal())
    state.beta = perturb(state.beta)
    state.alpha = float(perturb(state.alpha))
    if state.gamma is not None:
        state.gamma = float(perturb(state.gamma))
    state.mu = perturb(state.mu)
    state.b = perturb(state.b)
    return state


def initial_state(model, rng, attempts=INIT_ATTEMPTS):
    """Jittered least-squares start with a finite log posterior.

    Raises:
        InitialisationError: If none of the attempts has a finite log posterior.
    """
    base = least_squares_start(model)
    for attempt in range(attempts):
        state = jitter_state(base, rng)
        if np.isfinite(model.log_posterior(state)):
            LOG.debug("Found starting state after %i attempt(s)", attempt + 1)
            return state
    raise InitialisationError(
        f"No starting state with a finite log posterior in {attempts} attempts"
    )


class ChainResult:
    """Draws and diagnostics of a single chain."""

    def __init__(self, chain, draws, deviance, log_posterior, b_mean, acceptance,
                 divergences=0, burn_in_divergences=0, step_size=None, frozen=None):
        self.chain = chain
        self.draws = draws
        self.deviance = deviance
        self.log_posterior = log_posterior
        self.b_mean = b_mean
        self.acceptance = acceptance
        self.divergences = divergences
        self.burn_in_divergences = burn_in_divergences
        self.step_size = step_size
        self.frozen = frozen


class _Recorder:
    def __init__(self, model, cfg, chain):
        self.model = model
        self.cfg = cfg
        self.chain = chain
        n_names = len(population_names(model.spec))
        self.draws = np.empty((cfg.retained, n_names))
        self.deviance = np.empty(cfg.retained)
        self.log_posterior = np.empty(cfg.retained)
        self.b_sum = np.zeros((model.n, model.spec.n_random))
        self.count = 0
        self.report_every = max(cfg.iterations // 10, 1)

    def record(self, iteration, state):
        if not self.cfg.is_retained(iteration) or self.count >= self.cfg.retained:
            return
        j = self.count
        if j % 100 == 0 and not state.is_valid():
            raise NumericalError(
                f"Chain {self.chain}: invalid state at iteration {iteration}: {state!r}"
            )
        self.draws[j] = state.population_values(self.model.spec)
        self.deviance[j] = self.model.deviance(state)
        self.log_posterior[j] = self.model.log_posterior(state)
        self.b_sum += state.b
        self.count += 1

    def progress(self, iteration, message):
        if (iteration + 1) % self.report_every == 0:
            LOG.info(
                "Chain %i: %i/%i iterations (%s)",
                self.chain, iteration + 1, self.cfg.iterations, message,
            )

    @property
    def b_mean(self):
        return self.b_sum / max(self.count, 1)


def _run_mwg(model, cfg, state, rng, recorder):
    adaptation = gibbs.Adaptation(model.spec, model.n)
    frozen = None
    for iteration in range(cfg.iterations):
        if iteration == cfg.burn_in:
            adaptation.freeze()
            adaptation.reset_rates()
            frozen = adaptation.snapshot()
        state = gibbs.mwg_step(state, model, adaptation, rng)
        recorder.record(iteration, state)
        recorder.progress(
            iteration,
            ", ".join(f"{k} {v:.2f}" for k, v in adaptation.acceptance_rates().items()),
        )
    if frozen is not None and adaptation.snapshot() != frozen:
        raise RuntimeError(f"Chain {recorder.chain}: proposal scales changed after burn-in")
    return ChainResult(
        recorder.chain,
        recorder.draws,
        recorder.deviance,
        recorder.log_posterior,
        recorder.b_mean,
        adaptation.acceptance_rates(),
        frozen=frozen,
    )


def _run_nuts(model, cfg, state, rng, recorder):
    packer = model.packer
    sampler = nuts.NutsSampler(
        model.value_and_grad,
        packer.size,
        rng,
        burn_in=cfg.burn_in,
        target_accept=cfg.target_accept,
        max_tree_depth=cfg.max_tree_depth,
        adapt_iterations=cfg.step_size_adapt_iters,
    )
    theta = packer.pack(state)
    frozen = None
    for iteration in range(cfg.iterations):
        if iteration == cfg.burn_in:
            frozen = {"step_size": sampler.step_size, "inv_mass": sampler.inv_mass.tolist()}
            LOG.debug("Chain %i: froze step size %.4g", recorder.chain, sampler.step_size)
        theta, info = sampler.step(theta, iteration)
        if cfg.is_retained(iteration):
            recorder.record(iteration, packer.unpack(theta))
        recorder.progress(iteration, f"step size {sampler.step_size:.3g}")
    if frozen is not None and frozen["step_size"] != sampler.step_size:
        raise RuntimeError(f"Chain {recorder.chain}: step size changed after burn-in")
    return ChainResult(
        recorder.chain,
        recorder.draws,
        recorder.deviance,
        recorder.log_posterior,
        recorder.b_mean,
        {"accept_stat": sampler.acceptance_rate},
        divergences=sampler.divergences,
        burn_in_divergences=sampler.burn_in_divergences,
        step_size=sampler.step_size,
        frozen=frozen,
    )


def run_chain(spec, subjects, cfg, chain):
    """Runs one chain start to finish; module level so worker processes can pickle it."""
    model = JointModel(spec, subjects)
    rng = chain_rng(cfg.seed, chain)
    state = initial_state(model, rng)
    recorder = _Recorder(model, cfg, chain)
    LOG.info("Starting chain %i (%s)", chain, cfg.algorithm)
    if cfg.algorithm == "NUTS":
        return _run_nuts(model, cfg, state, rng, recorder)
    return _run_mwg(model, cfg, state, rng, recorder)


class PosteriorSamples(Serialiser):
    """Retained draws of every chain.

    Attributes:
        names (list): Population parameter names, one per draw column.
        draws (numpy.ndarray): chains x draws x parameters.
        deviance (numpy.ndarray): chains x draws conditional deviance.
        log_posterior (numpy.ndarray): chains x draws log posterior.
        b_mean (numpy.ndarray): chains x subjects x K_re posterior mean of b.
        subject_ids (list): Subject identifiers, rows of b_mean.
        acceptance (list): Per-chain acceptance statistics.
        divergences (list): Per-chain post burn-in divergences (NUTS).
        step_sizes (list): Per-chain frozen step size (NUTS).
        frozen (list): Per-chain kernel parameters at the end of burn-in.
        warnings (list): Diagnostic warnings raised while sampling.
        config (SamplerConfig): Settings used.
    """

    def __init__(self, names, results, subject_ids, config, warnings=None):
        results = sorted(results, key=lambda r: r.chain)
        self.names = list(names)
        self.draws = np.stack([r.draws for r in results])
        self.deviance = np.stack([r.deviance for r in results])
        self.log_posterior = np.stack([r.log_posterior for r in results])
        self.b_mean = np.stack([r.b_mean for r in results])
        self.subject_ids = list(subject_ids)
        self.acceptance = [r.acceptance for r in results]
        self.divergences = [r.divergences for r in results]
        self.burn_in_divergences = [r.burn_in_divergences for r in results]
        self.step_sizes = [r.step_size for r in results]
        self.frozen = [r.frozen for r in results]
        self.config = config
        self.warnings = list(warnings or [])

    def __repr__(self):
        return (
            f"PosteriorSamples(chains={self.n_chains}, draws={self.n_draws},"
            f" parameters={len(self.names)})"
        )

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[1]

    def chains_of(self, name):
        """chains x draws matrix of one parameter."""
        try:
            index = self.names.index(name)
        except ValueError:
            raise KeyError(f"No parameter named {name!r}") from None
        return self.draws[:, :, index]

    def posterior_means(self):
        return dict(zip(self.names, self.draws.mean(axis=(0, 1))))

    def random_effect_means(self):
        """Chain-pooled posterior mean of b, subjects x K_re."""
        return self.b_mean.mean(axis=0)

    def to_dict(self):
        """Run manifest fields (draws are written separately as CSV)."""
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "names": self.names,
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "acceptance": self.acceptance,
            "divergences": self.divergences,
            "burn_in_divergences": self.burn_in_divergences,
            "step_sizes": self.step_sizes,
            "frozen": self.frozen,
            "warnings": self.warnings,
        }


def _divergence_warnings(results, cfg):
    warnings = []
    for result in results:
        if cfg.burn_in and result.burn_in_divergences > 0.5 * cfg.burn_in:
            message = (
                f"Chain {result.chain}: {result.burn_in_divergences} divergent transitions"
                f" in {cfg.burn_in} burn-in iterations"
            )
            LOG.warning(message)
            warnings.append(message)
        if result.divergences:
            message = (
                f"Chain {result.chain}: {result.divergences} divergent transitions after burn-in"
            )
            LOG.warning(message)
            warnings.append(message)
    return warnings


def run(spec, subjects, cfg):
    """Runs every chain and pools them.

    Parameters:
        spec (ModelSpec): Model to fit.
        subjects (SubjectContainer): Data.
        cfg (SamplerConfig): Chain settings.

    Returns:
        PosteriorSamples: Retained draws of all chains, in chain order.

    Raises:
        InitialisationError: If a chain cannot find a finite starting state.
    """
    cfg.validate()
    JointModel(spec, subjects)
    jobs = [(spec, subjects, cfg, chain) for chain in range(cfg.chains)]
    workers = min(cfg.threads, cfg.chains)
    if workers > 1:
        LOG.info("Running %i chains on %i processes", cfg.chains, workers)
        with multiprocessing.Pool(workers) as pool:
            results = pool.starmap(run_chain, jobs)
    else:
        results = [run_chain(*job) for job in jobs]
    return PosteriorSamples(
        population_names(spec),
        results,
        [subject.id for subject in subjects],
        cfg,
        warnings=_divergence_warnings(results, cfg),
    )
