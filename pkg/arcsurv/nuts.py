"""No-U-Turn sampling on an unconstrained parameter vector.

Multinomial NUTS: trajectories double in a random direction until the
generalised no-U-turn criterion fails, a subtree diverges or the depth cap
is reached. Proposals are drawn from the trajectory with weights exp(-H),
using biased progressive sampling between the old tree and each new
subtree. Step size is tuned by dual averaging, and a diagonal inverse mass
matrix is estimated from draws in the second half of burn-in.
"""

import logging

import numpy as np

from arcsurv.errors import NumericalError


LOG = logging.getLogger(__name__)

MAX_ENERGY_ERROR = 1000.0


def kinetic_energy(momentum, inv_mass):
    return 0.5 * momentum @ (inv_mass * momentum)


def leapfrog(theta, momentum, step, n_steps, grad, inv_mass=None):
    """Leapfrog integration of Hamiltonian dynamics.

    Parameters:
        theta (numpy.ndarray): Position.
        momentum (numpy.ndarray): Momentum.
        step (float): Step size; negative steps integrate backwards.
        n_steps (int): Number of steps.
        grad (callable): Gradient of the log density.
        inv_mass (numpy.ndarray): Diagonal inverse mass matrix, identity if None.

    Returns:
        tuple: (theta, momentum, divergent). Integration stops at the first
            non-finite gradient and reports it as a divergence.
    """
    theta = np.array(theta, dtype=float)
    r = np.array(momentum, dtype=float)
    inv_mass = np.ones_like(theta) if inv_mass is None else inv_mass
    if step == 0 or n_steps == 0:
        return theta, r, False
    g = _safe_grad(grad, theta)
    if g is None:
        return theta, r, True
    for _ in range(n_steps):
        r = r + 0.5 * step * g
        theta = theta + step * inv_mass * r
        g = _safe_grad(grad, theta)
        if g is None:
            return theta, r, True
        r = r + 0.5 * step * g
    return theta, r, False


def _safe_grad(grad, theta):
    try:
        g = np.asarray(grad(theta), dtype=float)
    except NumericalError:
        return None
    return g if np.all(np.isfinite(g)) else None


class _Point:
    __slots__ = ("theta", "r", "grad", "logp")

    def __init__(self, theta, r, grad, logp):
        self.theta = theta
        self.r = r
        self.grad = grad
        self.logp = logp


class _Tree:
    __slots__ = (
        "left", "right", "proposal", "log_weight", "rho",
        "sum_accept", "n_leapfrog", "turning", "divergent",
    )

    def __init__(
        self,
        left=None,
        right=None,
        proposal=None,
        log_weight=-np.inf,
        rho=None,
        sum_accept=0.0,
        n_leapfrog=0,
        turning=False,
        divergent=False,
    ):
        self.left = left
        self.right = right
        self.proposal = proposal
        self.log_weight = log_weight
        self.rho = rho
        self.sum_accept = sum_accept
        self.n_leapfrog = n_leapfrog
        self.turning = turning
        self.divergent = divergent


class NutsInfo:
    """Diagnostics of one NUTS transition.

    Attributes:
        accept_stat (float): Mean Metropolis acceptance over the trajectory.
        n_leapfrog (int): Leapfrog steps taken.
        depth (int): Deepest subtree height built.
        divergent (bool): Whether the trajectory diverged.
    """

    def __init__(self, accept_stat, n_leapfrog, depth, divergent):
        self.accept_stat = accept_stat
        self.n_leapfrog = n_leapfrog
        self.depth = depth
        self.divergent = divergent

    def __repr__(self):
        return (
            f"NutsInfo(accept_stat={self.accept_stat:.3f}, n_leapfrog={self.n_leapfrog},"
            f" depth={self.depth}, divergent={self.divergent})"
        )


class _Integrator:
    def __init__(self, value_and_grad, inv_mass, H0):
        self.value_and_grad = value_and_grad
        self.inv_mass = inv_mass
        self.H0 = H0

    def step(self, point, step):
        r = point.r + 0.5 * step * point.grad
        theta = point.theta + step * self.inv_mass * r
        try:
            logp, grad = self.value_and_grad(theta)
        except NumericalError:
            return None
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return None
        return _Point(theta, r + 0.5 * step * grad, grad, logp)

    def no_uturn(self, rho, start, end):
        return (
            rho @ (self.inv_mass * start.r) > 0
            and rho @ (self.inv_mass * end.r) > 0
        )


def _merge(integrator, old, new, direction, rng, biased):
    n_leapfrog = old.n_leapfrog + new.n_leapfrog
    sum_accept = old.sum_accept + new.sum_accept
    if new.divergent or new.turning:
        return _Tree(
            old.left, old.right, old.proposal, old.log_weight, old.rho,
            sum_accept, n_leapfrog, turning=new.turning, divergent=new.divergent,
        )
    log_weight = np.logaddexp(old.log_weight, new.log_weight)
    if biased:
        log_prob = min(0.0, new.log_weight - old.log_weight)
    else:
        log_prob = new.log_weight - log_weight
    proposal = new.proposal if np.log(rng.random()) < log_prob else old.proposal

    left, right = (old, new) if direction > 0 else (new, old)
    rho = left.rho + right.rho
    persist = (
        integrator.no_uturn(rho, left.left, right.right)
        and integrator.no_uturn(left.rho + right.left.r, left.left, right.left)
        and integrator.no_uturn(right.rho + left.right.r, left.right, right.right)
    )
    return _Tree(
        left.left, right.right, proposal, log_weight, rho,
        sum_accept, n_leapfrog, turning=not persist,
    )


def _build_tree(integrator, start, direction, depth, step_size, rng):
    if depth == 0:
        point = integrator.step(start, direction * step_size)
        if point is None:
            return _Tree(n_leapfrog=1, divergent=True)
        H = -point.logp + kinetic_energy(point.r, integrator.inv_mass)
        energy_error = H - integrator.H0
        if np.isnan(energy_error):
            energy_error = np.inf
        return _Tree(
            point, point, point,
            log_weight=-energy_error,
            rho=point.r.copy(),
            sum_accept=min(1.0, np.exp(-energy_error)) if energy_error > -700 else 1.0,
            n_leapfrog=1,
            divergent=energy_error > MAX_ENERGY_ERROR,
        )

    inner = _build_tree(integrator, start, direction, depth - 1, step_size, rng)
    if inner.divergent or inner.turning:
        return inner
    edge = inner.right if direction > 0 else inner.left
    outer = _build_tree(integrator, edge, direction, depth - 1, step_size, rng)
    return _merge(integrator, inner, outer, direction, rng, biased=False)


def nuts_step(theta, value_and_grad, step_size, rng, inv_mass=None, max_tree_depth=10, current=None):
    """One multinomial NUTS transition.

    Parameters:
        theta (numpy.ndarray): Current position.
        value_and_grad (callable): theta -> (log density, gradient).
        step_size (float): Leapfrog step size.
        rng (numpy.random.Generator): Random stream.
        inv_mass (numpy.ndarray): Diagonal inverse mass matrix.
        max_tree_depth (int): Largest subtree height; 0 gives a single
            leapfrog step with a Metropolis correction.
        current (tuple): (log density, gradient) at theta, if already known.

    Returns:
        tuple: (theta, log density, gradient, NutsInfo)
    """
    theta = np.asarray(theta, dtype=float)
    inv_mass = np.ones_like(theta) if inv_mass is None else inv_mass
    logp, grad = value_and_grad(theta) if current is None else current

    r0 = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    start = _Point(theta, r0, grad, logp)
    integrator = _Integrator(value_and_grad, inv_mass, -logp + kinetic_energy(r0, inv_mass))
    tree = _Tree(start, start, start, 0.0, r0.copy())

    depth_reached = 0
    divergent = False
    for depth in range(max_tree_depth + 1):
        direction = 1 if rng.random() < 0.5 else -1
        edge = tree.right if direction > 0 else tree.left
        subtree = _build_tree(integrator, edge, direction, depth, step_size, rng)
        depth_reached = depth
        tree = _merge(integrator, tree, subtree, direction, rng, biased=True)
        if tree.divergent:
            divergent = True
            break
        if tree.turning:
            break

    proposal = tree.proposal
    info = NutsInfo(
        accept_stat=tree.sum_accept / max(tree.n_leapfrog, 1),
        n_leapfrog=tree.n_leapfrog,
        depth=depth_reached,
        divergent=divergent,
    )
    return proposal.theta, proposal.logp, proposal.grad, info


class DualAveraging:
    """Dual averaging of log step size toward a target acceptance statistic.

    Attributes:
        target (float): Target mean acceptance statistic.
        gamma, t0, kappa (float): Adaptation constants.
    """

    def __init__(self, step_size, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = np.log(10.0 * step_size)
        self.log_step = np.log(step_size)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat):
        """Returns the step size for the next iteration."""
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_step = self.mu - np.sqrt(self.count) / self.gamma * self.h_bar
        weight = self.count ** -self.kappa
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return float(np.exp(self.log_step))

    @property
    def final_step_size(self):
        return float(np.exp(self.log_step_bar)) if self.count else float(np.exp(self.log_step))


def find_reasonable_step_size(theta, value_and_grad, rng, inv_mass=None, current=None):
    """Doubles or halves a unit step until one leapfrog step crosses acceptance 0.5."""
    theta = np.asarray(theta, dtype=float)
    inv_mass = np.ones_like(theta) if inv_mass is None else inv_mass
    logp, grad = value_and_grad(theta) if current is None else current
    r = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    start = _Point(theta, r, grad, logp)
    integrator = _Integrator(value_and_grad, inv_mass, 0.0)
    joint0 = logp - kinetic_energy(r, inv_mass)

    def log_ratio(step):
        point = integrator.step(start, step)
        if point is None:
            return -np.inf
        return point.logp - kinetic_energy(point.r, inv_mass) - joint0

    step = 1.0
    ratio = log_ratio(step)
    direction = 1.0 if ratio > np.log(0.5) else -1.0
    for _ in range(100):
        if not direction * ratio > -direction * np.log(2.0):
            break
        step *= 2.0 ** direction
        if not 1e-10 < step < 1e3:
            break
        ratio = log_ratio(step)
    return float(np.clip(step, 1e-10, 1e3))


class WelfordVariance:
    """Running variance of vectors."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self):
        """Sample variance shrunk toward 1e-3, as a regularised mass estimate."""
        n = self.count
        var = self.m2 / (n - 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class NutsSampler:
    """NUTS with burn-in adaptation of step size and diagonal mass matrix.

    Attributes:
        step_size (float): Current step size.
        inv_mass (numpy.ndarray): Diagonal inverse mass matrix.
        divergences (int): Divergent transitions after burn-in.
        burn_in_divergences (int): Divergent transitions during burn-in.
    """

    def __init__(
        self,
        value_and_grad,
        dim,
        rng,
        burn_in,
        target_accept=0.8,
        max_tree_depth=10,
        adapt_iterations=None,
    ):
        self.value_and_grad = value_and_grad
        self.rng = rng
        self.burn_in = burn_in
        self.max_tree_depth = max_tree_depth
        self.target_accept = target_accept
        self.inv_mass = np.ones(dim)
        self.adapt_end = burn_in if adapt_iterations is None else min(adapt_iterations, burn_in)
        self.window_start = self.adapt_end // 2
        self.window_end = self.adapt_end - self.adapt_end // 10
        self.variance = WelfordVariance(dim)
        self.step_size = None
        self.dual = None
        self.divergences = 0
        self.burn_in_divergences = 0
        self.accept_total = 0.0
        self.transitions = 0
        self.current = None

    def initialise(self, theta):
        self.current = self.value_and_grad(theta)
        self.step_size = find_reasonable_step_size(
            theta, self.value_and_grad, self.rng, self.inv_mass, self.current
        )
        self.dual = DualAveraging(self.step_size, target=self.target_accept)
        LOG.debug("Initial step size %.4g", self.step_size)

    def step(self, theta, iteration):
        """Advances one iteration, adapting while iteration < burn-in."""
        if self.current is None:
            self.initialise(theta)
        theta, logp, grad, info = nuts_step(
            theta,
            self.value_and_grad,
            self.step_size,
            self.rng,
            inv_mass=self.inv_mass,
            max_tree_depth=self.max_tree_depth,
            current=self.current,
        )
        self.current = (logp, grad)
        adapting = iteration < self.burn_in
        if info.divergent:
            if adapting:
                self.burn_in_divergences += 1
            else:
                self.divergences += 1
        if not adapting:
            self.accept_total += info.accept_stat
            self.transitions += 1
            return theta, info

        if iteration < self.adapt_end:
            self.step_size = self.dual.update(info.accept_stat)
        if self.window_start <= iteration < self.window_end:
            self.variance.add(theta)
        if iteration + 1 == self.window_end and self.variance.count >= 10:
            self.inv_mass = self.variance.variance()
            self.step_size = find_reasonable_step_size(
                theta, self.value_and_grad, self.rng, self.inv_mass, self.current
            )
            self.dual.restart(self.step_size)
            LOG.debug("Updated mass matrix, step size reset to %.4g", self.step_size)
        if iteration + 1 == self.adapt_end:
            self.step_size = self.dual.final_step_size
            LOG.debug("Froze step size at %.4g", self.step_size)
        return theta, info

    @property
    def acceptance_rate(self):
        return self.accept_total / self.transitions if self.transitions else float("nan")
