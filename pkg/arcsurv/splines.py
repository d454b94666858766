"""Clamped B-spline bases for the Model II trajectory.

The trajectory of subject i is Q_i(s) = sum_l b_il B_l(s). Order follows the
order = degree + 1 convention, so order 3 with one inner knot gives four basis
functions.
"""

import logging

import numpy as np

from arcsurv.errors import ConfigError, DomainError


LOG = logging.getLogger(__name__)


class SplineConfig:
    """Knot configuration of a clamped B-spline basis.

    Attributes:
        order (int): Polynomial degree + 1.
        inner_knots (tuple): Strictly increasing interior knots.
        boundary (tuple): Domain (start, end).
    """

    def __init__(self, order=3, inner_knots=None, boundary=(0.0, 1.0)):
        self.order = order
        self.inner_knots = tuple(float(k) for k in inner_knots) if inner_knots else ()
        self.boundary = tuple(float(b) for b in boundary)

    def __repr__(self):
        return (
            f"SplineConfig(order={self.order}, inner_knots={self.inner_knots},"
            f" boundary={self.boundary})"
        )

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return self.to_dict() == other.to_dict()
        return NotImplemented

    @property
    def n_basis(self):
        return len(self.inner_knots) + self.order

    def validate(self):
        """Raises ConfigError naming the first violated invariant."""
        if not isinstance(self.order, (int, np.integer)) or self.order < 2:
            raise ConfigError(f"order must be an integer >= 2, got {self.order}")
        if len(self.boundary) != 2:
            raise ConfigError("boundary must be a (start, end) pair")
        start, end = self.boundary
        if not start < end:
            raise ConfigError(f"boundary start {start} must be below end {end}")
        knots = np.asarray(self.inner_knots, dtype=float)
        if knots.size and np.any(np.diff(knots) <= 0):
            raise ConfigError(
                f"inner knots must be strictly increasing, got {self.inner_knots}"
            )
        if knots.size and (knots[0] <= start or knots[-1] >= end):
            raise ConfigError(
                f"inner knots must lie strictly inside the boundary {self.boundary}"
            )

    def to_dict(self):
        return {
            "order": self.order,
            "inner_knots": list(self.inner_knots),
            "boundary": list(self.boundary),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            order=d.get("order", 3),
            inner_knots=d.get("inner_knots"),
            boundary=d.get("boundary", (0.0, 1.0)),
        )


def knot_vector(cfg):
    """Builds the clamped knot vector of a spline configuration.

    Parameters:
        cfg (SplineConfig): A valid configuration.

    Returns:
        numpy.ndarray: start repeated `order` times, the inner knots, and end
            repeated `order` times.

    Raises:
        ConfigError: If the configuration is invalid.
    """
    cfg.validate()
    start, end = cfg.boundary
    return np.concatenate(
        [np.full(cfg.order, start), np.asarray(cfg.inner_knots, float), np.full(cfg.order, end)]
    )


def greville_abscissae(cfg):
    """Coefficients reproducing the identity Q(s) = s."""
    knots = knot_vector(cfg)
    k = cfg.order
    return np.array([knots[i + 1:i + k].mean() for i in range(cfg.n_basis)])


def _check_domain(cfg, s):
    s = np.asarray(s, dtype=float)
    start, end = cfg.boundary
    if np.any(~np.isfinite(s)) or np.any(s < start) or np.any(s > end):
        bad = s[(s < start) | (s > end) | ~np.isfinite(s)]
        raise DomainError(
            f"Spline evaluated at {bad.ravel()[:5]} outside domain [{start}, {end}]"
        )
    return s


def _cox_de_boor(knots, order, s):
    """Order-`order` basis values at each s, shape (len(s), len(knots) - order).

    Intervals are closed on the left; the last non-empty interval is also
    closed on the right so that the clamped end is included.
    """
    n_intervals = len(knots) - 1
    nonempty = np.flatnonzero(knots[1:] > knots[:-1])
    span = np.searchsorted(knots, s, side="right") - 1
    span = np.clip(span, nonempty[0], nonempty[-1])

    basis = np.zeros((s.size, n_intervals))
    basis[np.arange(s.size), span] = 1.0

    for k in range(2, order + 1):
        width = len(knots) - k
        left_den = knots[k - 1:k - 1 + width] - knots[:width]
        right_den = knots[k:k + width] - knots[1:1 + width]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(
                left_den > 0, (s[:, None] - knots[:width]) / left_den, 0.0
            )
            right = np.where(
                right_den > 0, (knots[k:k + width] - s[:, None]) / right_den, 0.0
            )
        basis = left * basis[:, :width] + right * basis[:, 1:width + 1]
    return basis


def basis_matrix(cfg, s):
    """Evaluates every basis function at every point of s.

    Returns:
        numpy.ndarray: Shape (len(s), K).
    """
    s = np.atleast_1d(_check_domain(cfg, s))
    return _cox_de_boor(knot_vector(cfg), cfg.order, s)


def basis_derivative_matrix(cfg, s):
    """First derivatives of every basis function at every point of s.

    Uses B'_{i,k} = (k-1) [B_{i,k-1} / (t_{i+k-1} - t_i) - B_{i+1,k-1} / (t_{i+k} - t_{i+1})].
    """
    s = np.atleast_1d(_check_domain(cfg, s))
    knots = knot_vector(cfg)
    k = cfg.order
    lower = _cox_de_boor(knots, k - 1, s)
    n = cfg.n_basis
    left_den = knots[k - 1:k - 1 + n] - knots[:n]
    right_den = knots[k:k + n] - knots[1:1 + n]
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(left_den > 0, lower[:, :n] / left_den, 0.0)
        right = np.where(right_den > 0, lower[:, 1:n + 1] / right_den, 0.0)
    return (k - 1) * (left - right)


def eval_basis(cfg, s):
    """Returns (B_1(s), ..., B_K(s)).

    Raises:
        DomainError: If s lies outside the spline boundary.
    """
    return basis_matrix(cfg, [s])[0]


def eval_basis_derivative(cfg, s):
    """Returns (B'_1(s), ..., B'_K(s)).

    Raises:
        DomainError: If s lies outside the spline boundary.
    """
    return basis_derivative_matrix(cfg, [s])[0]
