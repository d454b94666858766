"""Convergence diagnostics, posterior summaries and fitted curves."""

import logging

import numpy as np
import pandas as pd

from scipy import integrate

from arcsurv import quadrature
from arcsurv.errors import ConfigError
from arcsurv.likelihood import _expm1_ratio
from arcsurv.models import Serialiser
from arcsurv.splines import basis_derivative_matrix, basis_matrix


LOG = logging.getLogger(__name__)

MIN_RISK_SUBJECTS = 20
DIRECTIONS = ("above", "below")
COMBINE = ("all", "any")


def _as_chains(chains):
    """(chains, draws) array; a single vector is one chain."""
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 4:
        raise ValueError(f"Expected chains x draws with at least 4 draws, got shape {arr.shape}")
    return arr


def split_chains(chains):
    """Splits every chain into two halves, dropping the middle draw of odd chains."""
    arr = _as_chains(chains)
    n = arr.shape[1]
    half = n // 2
    return np.vstack([arr[:, :half], arr[:, n - half:]])


def _variance_components(arr):
    m, n = arr.shape
    W = arr.var(axis=1, ddof=1).mean()
    B = n * arr.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    return W, B


def split_rhat(chains):
    """Split-chain potential scale reduction factor.

    Parameters:
        chains (array-like): chains x draws, or a single chain.

    Returns:
        float: R-hat, or None when the within-chain variance is zero.
    """
    arr = split_chains(chains)
    n = arr.shape[1]
    W, B = _variance_components(arr)
    if not np.isfinite(W) or W <= 0:
        return None
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def autocovariance(x):
    """Biased autocovariance of a vector at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), n=size)
    return np.fft.irfft(f * np.conjugate(f), n=size)[:n] / n


def effective_sample_size(chains):
    """Effective sample size combined across split chains.

    Autocorrelations are averaged over chains and summed in adjacent pairs,
    truncated at the first non-positive pair and forced to be monotone.

    Returns:
        float: The uncapped ESS, which may exceed the draw total for
            antithetic chains; None for degenerate input.
    """
    arr = split_chains(chains)
    m, n = arr.shape
    W, B = _variance_components(arr)
    if not np.isfinite(W) or W <= 0:
        return None
    var_plus = (n - 1) / n * W + B / n
    acov = np.array([autocovariance(chain) for chain in arr]).mean(axis=0)
    rho = 1.0 - (W - acov) / var_plus
    rho[0] = 1.0

    pair_sums = []
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair_sums and pair <= 0:
            break
        if pair_sums:
            pair = min(pair, pair_sums[-1])
        pair_sums.append(pair)
    tau = -1.0 + 2.0 * float(np.sum(pair_sums))
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def dic(deviance):
    """Deviance information criterion with p_D = var(deviance) / 2.

    Returns:
        tuple: (DIC, p_D)
    """
    deviance = np.ravel(np.asarray(deviance, dtype=float))
    if deviance.size < 2:
        raise ValueError("DIC needs at least 2 deviance draws")
    p_d = deviance.var(ddof=1) / 2.0
    return float(deviance.mean() + p_d), float(p_d)


class SummaryRow(Serialiser):
    """Posterior summary of one parameter."""

    def __init__(self, name, mean, sd, q2_5, q97_5, rhat, ess, prob_positive, ess_capped=False):
        self.name = name
        self.mean = mean
        self.sd = sd
        self.q2_5 = q2_5
        self.q97_5 = q97_5
        self.rhat = rhat
        self.ess = ess
        self.prob_positive = prob_positive
        self.ess_capped = ess_capped

    def __repr__(self):
        return f"SummaryRow(name={self.name!r}, mean={self.mean:.4g}, sd={self.sd:.4g})"

    def covers(self, value):
        return bool(self.q2_5 <= value <= self.q97_5)

    def to_dict(self):
        return {
            "name": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "q2.5": self.q2_5,
            "q97.5": self.q97_5,
            "rhat": self.rhat,
            "ess": self.ess,
            "ess_capped": self.ess_capped,
            "prob_positive": self.prob_positive,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["q2_5"] = d.pop("q2.5")
        d["q97_5"] = d.pop("q97.5")
        return cls(**d)


def summarize_draws(name, chains):
    """SummaryRow of one parameter given its chains x draws matrix."""
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    pooled = arr.ravel()
    q2_5, q97_5 = np.percentile(pooled, [2.5, 97.5])
    rhat = ess = None
    if arr.shape[1] >= 4:
        rhat = split_rhat(arr)
        ess = effective_sample_size(arr)
    capped = ess is not None and ess > pooled.size
    return SummaryRow(
        name=name,
        mean=float(pooled.mean()),
        sd=float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0,
        q2_5=float(q2_5),
        q97_5=float(q97_5),
        rhat=rhat,
        ess=float(pooled.size) if capped else ess,
        prob_positive=float(np.mean(pooled > 0)),
        ess_capped=capped,
    )


def summarize(samples):
    """Pooled summary of every population parameter, in reporting order."""
    return [summarize_draws(name, samples.chains_of(name)) for name in samples.names]


def format_summary(rows, dic_value=None, p_d=None):
    """Plain-text table with Mean (SD), 2.5%, 97.5%, Rhat and ESS columns."""

    def fmt(value, spec=".3f"):
        return "-" if value is None else format(value, spec)

    lines = [
        f"{'Parameter':<14}{'Mean (SD)':>24}{'2.5%':>12}{'97.5%':>12}"
        f"{'Rhat':>8}{'ESS':>10}{'P(>0)':>8}"
    ]
    for row in rows:
        mean_sd = f"{row.mean:.4f} ({row.sd:.4f})"
        ess = fmt(row.ess, ".0f") + ("*" if row.ess_capped else "")
        lines.append(
            f"{row.name:<14}{mean_sd:>24}{row.q2_5:>12.4f}{row.q97_5:>12.4f}"
            f"{fmt(row.rhat):>8}{ess:>10}{row.prob_positive:>8.3f}"
        )
    if dic_value is not None:
        lines.append("")
        lines.append(f"DIC = {dic_value:.1f}, pD = {p_d:.1f}")
    return "\n".join(lines)


class CoverageReport(Serialiser):
    """Coverage of 95% credible intervals over simulation replicates.

    Attributes:
        rates (dict): Parameter name -> fraction of replicates covering the truth.
        replicates (int): Replicates scored.
        excluded (int): Replicates that failed and were left out.
    """

    def __init__(self, rates, replicates, excluded=0):
        self.rates = rates
        self.replicates = replicates
        self.excluded = excluded

    def __repr__(self):
        return f"CoverageReport(replicates={self.replicates}, excluded={self.excluded})"

    def to_dict(self):
        return {
            "rates": self.rates,
            "replicates": self.replicates,
            "excluded": self.excluded,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def score_coverage(replicate_summaries, truth):
    """Per-parameter coverage rate over replicates.

    Parameters:
        replicate_summaries (list): One list of SummaryRow per replicate, or
            None for a replicate that failed.
        truth (dict): Parameter name -> data-generating value.

    Returns:
        CoverageReport: Failed replicates are counted in `excluded`.
    """
    scored = [rows for rows in replicate_summaries if rows is not None]
    excluded = len(replicate_summaries) - len(scored)
    if not scored:
        return CoverageReport({name: None for name in truth}, 0, excluded)
    covers = {name: [] for name in truth}
    for rows in scored:
        by_name = {row.name: row for row in rows}
        for name, value in truth.items():
            covers[name].append(by_name[name].covers(value))
    rates = {name: float(np.mean(values)) for name, values in covers.items()}
    return CoverageReport(rates, len(scored), excluded)


def _profile_predictor(spec, means, profile):
    profile = np.asarray(profile, dtype=float)
    if profile.size != spec.n_covariates:
        raise ConfigError(
            f"profile has {profile.size} values, model has {spec.n_covariates} covariates",
            "/profile",
        )
    beta = np.array([means[f"beta[{p + 1}]"] for p in range(spec.n_covariates)])
    return float(profile @ beta), profile


def _grid_nodes(grid):
    if isinstance(grid, quadrature.Grid):
        return grid.nodes
    t_end, points = grid
    if points < 2:
        raise ConfigError("must be at least 2", "/grid/points")
    return quadrature.Grid(t_end, points - 1).nodes


def _mu(spec, means):
    return np.array([means[f"mu[{j + 1}]"] for j in range(spec.n_random)])


class CurveTable:
    """Fitted population curves and per-subject arc lengths.

    Attributes:
        population (pandas.DataFrame): t, trajectory, G, hazard, survival.
        subjects (pandas.DataFrame): id, t, G, observed_length; None if no
            random effects were given.
    """

    def __init__(self, population, subjects=None):
        self.population = population
        self.subjects = subjects


def population_curves(spec, means, profile, grid, slope_index=1):
    """Population trajectory, arc length, hazard and survival on a grid.

    For Models I and Ia, G(t) = t sqrt(1 + m^2) with m the posterior mean of
    mu[slope_index + 1]. For Model II the trajectory is the spline with
    coefficients given by the posterior mean of mu.
    """
    lp, profile = _profile_predictor(spec, means, profile)
    t = _grid_nodes(grid)
    lam = means["lambda"]
    alpha = means["alpha"]
    mu = _mu(spec, means)

    if spec.kind == "II":
        trajectory = basis_matrix(spec.spline, t) @ mu
        speed = np.hypot(1.0, basis_derivative_matrix(spec.spline, t) @ mu)
        G = integrate.cumulative_trapezoid(speed, t, initial=0.0)
        hazard = lam * np.exp(lp + alpha * G)
        H = integrate.cumulative_trapezoid(hazard, t, initial=0.0)
    else:
        if not 0 <= slope_index < spec.n_random:
            raise ConfigError(f"must lie in [0, {spec.n_random})", "/slope_index")
        c = np.hypot(1.0, mu[slope_index])
        trajectory = mu[0] + mu[1] * t
        if spec.has_gamma:
            trajectory = trajectory + means["gamma"] * profile[spec.longitudinal_covariate]
        G = t * c
        hazard = lam * np.exp(lp + alpha * G)
        H = lam * np.exp(lp) * t * _expm1_ratio(alpha * c * t)

    return pd.DataFrame(
        {
            "t": t,
            "trajectory": trajectory,
            "G": G,
            "hazard": hazard,
            "survival": np.exp(-H),
        }
    )


def subject_arc_lengths(spec, b_means, subjects, quad_points=None):
    """Per-subject G_i(t_i) at posterior-mean random effects plus the raw polyline length."""
    m = quad_points or spec.quad_points
    rows = []
    for subject, b_i in zip(subjects, b_means):
        if spec.kind == "II":
            slope = lambda s, b_i=b_i: basis_derivative_matrix(spec.spline, s) @ b_i
            G = quadrature.trapezoid_arc_length(
                quadrature.speed_from_slope(slope), quadrature.Grid(subject.t, m)
            ) if subject.t > 0 else 0.0
        else:
            G = subject.t * np.hypot(1.0, b_i[1])
        observed = (
            quadrature.polyline_length(np.column_stack([subject.times, subject.z]))
            if subject.n_measurements > 1
            else np.nan
        )
        rows.append({"id": subject.id, "t": subject.t, "G": G, "observed_length": observed})
    return pd.DataFrame(rows, columns=["id", "t", "G", "observed_length"])


def curve_table(spec, means, profile, grid, b_means=None, subjects=None, slope_index=1):
    """Population curves at a covariate profile and, optionally, per-subject arc lengths.

    Parameters:
        spec (ModelSpec): Fitted model.
        means (dict): Posterior means by population parameter name.
        profile (array-like): Covariate values, length P.
        grid: A quadrature.Grid or a (t_end, points) pair.
        b_means (numpy.ndarray): Posterior-mean random effects, subjects x K_re.
        subjects (SubjectContainer): Subjects matching the rows of b_means.
        slope_index (int): Random effect used as the slope for Models I/Ia.

    Returns:
        CurveTable
    """
    population = population_curves(spec, means, profile, grid, slope_index=slope_index)
    table = None
    if b_means is not None and subjects is not None:
        table = subject_arc_lengths(spec, b_means, subjects)
    return CurveTable(population, table)


def subject_trajectories(spec, means, b_means, subjects, ids, points=50):
    """Fitted trajectory and running arc length of selected subjects on [0, t_i].

    Returns:
        pandas.DataFrame: Columns id, s, trajectory, G.
    """
    index = {subject.id: i for i, subject in enumerate(subjects)}
    frames = []
    for id in ids:
        if id not in index:
            raise ConfigError(f"unknown subject id {id!r}", "/subjects")
        i = index[id]
        subject = subjects[i]
        b_i = np.asarray(b_means[i])
        s = quadrature.Grid(subject.t, points - 1).nodes if subject.t > 0 else np.zeros(1)
        if spec.kind == "II":
            trajectory = basis_matrix(spec.spline, s) @ b_i
            slope = basis_derivative_matrix(spec.spline, s) @ b_i
            G = integrate.cumulative_trapezoid(np.hypot(1.0, slope), s, initial=0.0)
        else:
            trajectory = b_i[0] + b_i[1] * s
            if spec.has_gamma:
                trajectory = trajectory + means["gamma"] * subject.x[spec.longitudinal_covariate]
            G = s * np.hypot(1.0, b_i[1])
        frames.append(pd.DataFrame({"id": id, "s": s, "trajectory": trajectory, "G": G}))
    if not frames:
        return pd.DataFrame(columns=["id", "s", "trajectory", "G"])
    return pd.concat(frames, ignore_index=True)


def _exceeds(values, level, direction):
    values = np.asarray(values, dtype=float)
    if direction == "above":
        return values > np.percentile(values, level)
    return values < np.percentile(values, 100.0 - level)


def flag_high_risk(G, t, level=95.0, G_direction="above", t_direction="above", combine="all"):
    """Flags subjects outside the percentile reference ranges of G_i(t_i) and t_i.

    "above" flags values strictly above the level-th percentile, "below"
    values strictly below the (100 - level)-th percentile. combine="all"
    requires both limits to be violated, "any" either.

    Returns:
        numpy.ndarray: Boolean flag per subject.
    """
    for pointer, direction in (("/risk/G", G_direction), ("/risk/t", t_direction)):
        if direction not in DIRECTIONS:
            raise ConfigError(f"expected one of {DIRECTIONS}", pointer)
    if combine not in COMBINE:
        raise ConfigError(f"expected one of {COMBINE}", "/risk/combine")
    if not 0 < level < 100:
        raise ConfigError("must lie in (0, 100)", "/risk/level")
    G = np.asarray(G, dtype=float)
    t = np.asarray(t, dtype=float)
    if G.shape != t.shape:
        raise ValueError("G and t differ in length")
    if G.size < MIN_RISK_SUBJECTS:
        LOG.warning(
            "Only %i subjects, percentile reference ranges are unreliable below %i",
            G.size, MIN_RISK_SUBJECTS,
        )
    if G.size == 0:
        return np.zeros(0, dtype=bool)
    flags_G = _exceeds(G, level, G_direction)
    flags_t = _exceeds(t, level, t_direction)
    if combine == "all":
        return flags_G & flags_t
    return flags_G | flags_t
