"""Quadrature for arc lengths and the nested cumulative hazard.

A trajectory g(s) = (s, Q(s)) has speed |g'(s)| = sqrt(1 + Q'(s)^2) and arc
length G(t) = int_0^t |g'(s)| ds. The cumulative hazard nests G inside an
outer integral; both integrals share one grid so that H(t) costs O(m).
"""

import logging

import numpy as np

from scipy import integrate

from arcsurv.errors import ConfigError, NumericalError


LOG = logging.getLogger(__name__)

# log of the largest finite double, exp() overflows beyond this
_MAX_EXPONENT = np.log(np.finfo(float).max)


class Grid:
    """Equally spaced quadrature grid on [0, t_end].

    Attributes:
        t_end (float): Right end of the integration interval.
        m (int): Number of sub-intervals.
    """

    def __init__(self, t_end, m):
        if not m >= 1:
            raise ConfigError(f"Grid needs at least one sub-interval, got m={m}")
        if not t_end > 0:
            raise ConfigError(f"Grid end must be positive, got t_end={t_end}")
        self.t_end = float(t_end)
        self.m = int(m)

    def __repr__(self):
        return f"Grid(t_end={self.t_end}, m={self.m})"

    @property
    def step(self):
        return self.t_end / self.m

    @property
    def nodes(self):
        return np.arange(self.m + 1) * self.step


class RombergResult:
    """Outcome of a Romberg integration.

    Attributes:
        value (float): Best extrapolated estimate.
        converged (bool): Whether successive diagonal entries met the tolerance.
        levels (int): Number of extrapolation levels used.
    """

    def __init__(self, value, converged, levels):
        self.value = value
        self.converged = converged
        self.levels = levels

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return (
            f"RombergResult(value={self.value!r}, converged={self.converged},"
            f" levels={self.levels})"
        )


def speed_from_slope(slope):
    """Wraps a slope evaluator s -> Q'(s) as a speed evaluator s -> |g'(s)|."""
    def speed(s):
        return np.hypot(1.0, slope(s))
    return speed


def evaluate_speed(speed, grid):
    """Evaluates speed on all grid nodes, rejecting non-finite values."""
    nodes = grid.nodes
    values = np.asarray(speed(nodes), dtype=float)
    if values.shape != nodes.shape:
        values = np.broadcast_to(values, nodes.shape).astype(float)
    bad = ~np.isfinite(values)
    if bad.any():
        node = nodes[np.argmax(bad)]
        raise NumericalError(f"Non-finite speed value at node s={node}")
    return values


def trapezoid_arc_length(speed, grid):
    """Composite trapezoid arc length over a grid.

    Parameters:
        speed (callable): Vectorised speed evaluator s -> |g'(s)|.
        grid (Grid): Quadrature grid.

    Returns:
        float: Approximation of G(grid.t_end).

    Raises:
        NumericalError: If speed is non-finite at any node.
    """
    values = evaluate_speed(speed, grid)
    return float(integrate.trapezoid(values, dx=grid.step))


def cumulative_arc_length_grid(speed, grid):
    """Arc length at every grid node, G(s_0) = 0, ..., G(s_m), in one pass."""
    values = evaluate_speed(speed, grid)
    return integrate.cumulative_trapezoid(values, dx=grid.step, initial=0.0)


def cumulative_hazard_terms(lambda0, linpred, alpha, arc_lengths, nodes):
    """Hazard values h(s_k) = lambda0(s_k) exp(linpred + alpha G(s_k)).

    Raises:
        NumericalError: If the exponent overflows.
    """
    exponent = linpred + alpha * arc_lengths
    worst = np.max(exponent)
    if not np.isfinite(worst) or worst > _MAX_EXPONENT:
        k = int(np.argmax(exponent))
        raise NumericalError(
            f"Hazard exponent overflow: alpha*G={alpha * arc_lengths[k]!r} at s={nodes[k]}"
        )
    return np.asarray(lambda0(nodes), dtype=float) * np.exp(exponent)


def nested_cumulative_hazard(lambda0, linpred, alpha, speed, grid):
    """Cumulative hazard H(t_end) with the arc length nested in the exponent.

    The inner arc length is built as prefix sums over the grid, then a single
    outer trapezoid pass integrates the hazard over the same nodes.

    Parameters:
        lambda0 (callable): Baseline hazard evaluator, vectorised over s.
        linpred (float): Linear predictor x'beta.
        alpha (float): Association coefficient.
        speed (callable): Speed evaluator s -> |g'(s)|.
        grid (Grid): Quadrature grid on [0, t].

    Returns:
        float: H(t) >= 0.

    Raises:
        NumericalError: On non-finite speed or exponent overflow.
    """
    arc = cumulative_arc_length_grid(speed, grid)
    hazard = cumulative_hazard_terms(lambda0, linpred, alpha, arc, grid.nodes)
    return float(integrate.trapezoid(hazard, dx=grid.step))


def constant_baseline(lam):
    """Baseline hazard evaluator for lambda0(s) = lam."""
    def lambda0(s):
        return np.full(np.shape(s), lam, dtype=float)
    return lambda0


def polyline_length(points):
    """Total length of the polyline through (s, q) points.

    Raises:
        ValueError: With fewer than two points or non-increasing s.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
        raise ValueError("Expected at least two (s, q) points")
    ds = np.diff(points[:, 0])
    if np.any(ds <= 0):
        raise ValueError("Polyline s values must be strictly increasing")
    return float(np.hypot(ds, np.diff(points[:, 1])).sum())


def romberg(integrand, a, b, tol=1e-10, max_levels=20):
    """Romberg integration of integrand over [a, b].

    Successive trapezoid estimates with halved step are combined by Richardson
    extrapolation. Stops once two successive diagonal entries differ by less
    than tol (absolute).

    Parameters:
        integrand (callable): Vectorised evaluator.
        a (float): Lower limit.
        b (float): Upper limit, b > a.
        tol (float): Absolute tolerance between diagonal entries.
        max_levels (int): Maximum number of halvings.

    Returns:
        RombergResult: Value with a convergence flag; non-convergence is not
            an error, callers decide.
    """
    if not a < b:
        raise ValueError(f"Expected a < b, got a={a}, b={b}")
    if not tol > 0:
        raise ValueError(f"Expected positive tolerance, got {tol}")

    h = b - a
    fa, fb = np.asarray(integrand(np.array([a, b])), dtype=float)
    previous = [0.5 * h * (fa + fb)]

    for level in range(1, max_levels + 1):
        h *= 0.5
        midpoints = a + h * (2 * np.arange(2 ** (level - 1)) + 1)
        trap = 0.5 * previous[0] + h * np.sum(integrand(midpoints))
        row = [trap]
        factor = 1.0
        for j in range(1, level + 1):
            factor *= 4.0
            row.append(row[j - 1] + (row[j - 1] - previous[j - 1]) / (factor - 1.0))
        if abs(row[-1] - previous[-1]) < tol:
            return RombergResult(row[-1], True, level)
        previous = row

    LOG.debug("Romberg did not converge after %d levels", max_levels)
    return RombergResult(previous[-1], False, max_levels)
