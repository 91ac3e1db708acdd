# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Numerical kernel shared by the model, calibration and pce modules.

Includes Gauss-Hermite quadrature, the normal and logistic special functions,
a damped Newton-Raphson solver, exact sampling of bivariate normal pairs
truncated on their difference, and seeded random number generators.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from ..exceptions import DegenerateStratumError, DomainError, NonConvergenceError, NumericError, ParameterError

__all__ = ['Interval', 'GaussHermiteRule', 'NewtonConfig', 'gauss_hermite_rule', 'ghq_expectation',
           'std_normal_cdf', 'normal_interval_mass', 'expit', 'expit_derivative', 'logit',
           'newton_solve', 'sample_strata_pair', 'make_rng', 'spawn_rngs']

MAX_QUADRATURE_ORDER = 128
SQRT_PI = np.sqrt(np.pi)
MIN_STRATUM_MASS = 1e-12

SeedLike = Union[int, Sequence[int], np.random.Generator]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """
    Build a counter-based generator from a seed or a key of seeds.

    Parameters
    ----------
    seed : int, sequence of int, or `~numpy.random.Generator`
        A non-negative integer, a tuple key such as ``(seed, draw, grid_index)``
        (each key gives an independent stream), or an existing generator which
        is returned unchanged.

    Returns
    -------
    response : `~numpy.random.Generator`
        A Philox generator seeded through `~numpy.random.SeedSequence`.
    """

    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ParameterError("A seed is required for this operation.")

    entropy = [int(k) for k in np.atleast_1d(seed)]
    if any(k < 0 for k in entropy):
        raise ParameterError(f"Seeds must be non-negative integers, got {seed}.")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spawn_rngs(seed: Union[int, Sequence[int]], count: int) -> list:
    """
    Independent child generators (one per chain or worker) derived from a single seed.
    """

    entropy = [int(k) for k in np.atleast_1d(seed)]
    children = np.random.SeedSequence(entropy).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


@dataclass(frozen=True)
class Interval:
    """
    A real interval ``[lower, upper)`` used to define principal strata.

    Either endpoint may be infinite.  Endpoint closure has no effect on
    continuous laws, so it is not tracked.
    """

    lower: float = -np.inf
    upper: float = np.inf
    label: Optional[str] = None

    def __post_init__(self):
        lower, upper = float(self.lower), float(self.upper)
        if np.isnan(lower) or np.isnan(upper) or not lower < upper:
            raise ParameterError(f"Interval bounds must satisfy lower < upper, got ({lower}, {upper}).")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)
        if self.label is None:
            object.__setattr__(self, 'label', f"[{lower:g},{upper:g})")

    def contains(self, x):
        x = np.asarray(x)
        return (x >= self.lower) & (x <= self.upper)

    def to_dict(self):
        return {"label": self.label, "lower": self.lower, "upper": self.upper}

    def __str__(self):
        return self.label


@dataclass(frozen=True, eq=False)
class GaussHermiteRule:
    """
    Gauss-Hermite nodes and weights for the weight function ``exp(-x**2)``.

    Attributes
    ----------
    order : int
        Number of nodes.
    nodes : `~numpy.ndarray`
        Physicists' nodes, symmetric about 0.
    weights : `~numpy.ndarray`
        Raw weights, summing to ``sqrt(pi)``.
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def rescaled(self, mean=0.0, var=1.0):
        """
        Evaluation points and normalized weights for expectations under N(mean, var).

        ``mean`` and ``var`` broadcast against each other; the returned points
        carry one extra trailing axis of length ``order``.
        """

        mean = np.asarray(mean, dtype=float)[..., None]
        scale = np.sqrt(2.0 * np.asarray(var, dtype=float))[..., None]
        return mean + scale * self.nodes, self.weights / SQRT_PI


@lru_cache(maxsize=None)
def gauss_hermite_rule(n: int = 20) -> GaussHermiteRule:
    """
    Compute the n-point Gauss-Hermite rule.

    Nodes and weights come from the eigen decomposition of the symmetric
    tridiagonal Jacobi matrix (Golub-Welsch, as implemented by
    `scipy.special.roots_hermite`), then symmetrized so that the rule is
    exactly symmetric about 0.

    Parameters
    ----------
    n : int
        Number of nodes, 1 to 128.

    Returns
    -------
    response : `GaussHermiteRule`
    """

    if int(n) != n or not 1 <= n <= MAX_QUADRATURE_ORDER:
        raise ParameterError(f"Quadrature order must be an integer in [1, {MAX_QUADRATURE_ORDER}], got {n}.")
    n = int(n)

    nodes, weights = special.roots_hermite(n)
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])

    nodes.setflags(write=False)
    weights.setflags(write=False)
    return GaussHermiteRule(order=n, nodes=nodes, weights=weights)


def ghq_expectation(rule: GaussHermiteRule, mean, var, f: Callable):
    """
    Approximate E[f(X)] for X ~ N(mean, var) by Gauss-Hermite quadrature.

    Parameters
    ----------
    rule : `GaussHermiteRule`
        The quadrature rule.
    mean, var : float or array
        Moments of the normal law; they broadcast against each other.  Where
        ``var`` is 0 the result is ``f(mean)`` exactly.
    f : callable
        Vectorized real function.

    Returns
    -------
    response : float or array
        The expectation(s), shaped like the broadcast of ``mean`` and ``var``.
    """

    mean, var = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(var, dtype=float))
    if np.any(var < 0) or np.any(np.isnan(var)):
        raise ParameterError("Quadrature variance must be non-negative.")

    points, weights = rule.rescaled(mean, var)
    values = np.asarray(f(points), dtype=float)
    if not np.all(np.isfinite(values)):
        raise NumericError("Non-finite integrand value at a quadrature node.")
    result = values @ weights

    degenerate = var == 0
    if np.any(degenerate):
        result = np.where(degenerate, np.asarray(f(mean), dtype=float), result)
    return result[()]


def std_normal_cdf(x):
    """
    Standard normal CDF through the complementary error function.
    """

    return (0.5 * special.erfc(-np.asarray(x, dtype=float) / np.sqrt(2.0)))[()]


def normal_interval_mass(a, b):
    """
    Standard normal probability of ``[a, b]``.

    Intervals in the upper tail are reflected into the lower tail so that the
    difference of CDF values keeps its relative accuracy.
    """

    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    upper_tail = a > 0
    lower = np.where(upper_tail, -b, a)
    upper = np.where(upper_tail, -a, b)
    return (std_normal_cdf(upper) - std_normal_cdf(lower))[()]


def expit(x):
    """Logistic function, overflow safe."""
    return special.expit(np.asarray(x, dtype=float))[()]


def expit_derivative(x):
    """Derivative of the logistic function."""
    p = special.expit(np.asarray(x, dtype=float))
    return (p * (1.0 - p))[()]


def logit(p):
    """
    Log-odds of ``p``.

    Raises
    ------
    DomainError
        If any value lies outside the open interval (0, 1).
    """

    p = np.asarray(p, dtype=float)
    if not np.all((p > 0) & (p < 1)):
        raise DomainError("logit is only defined on the open interval (0, 1).")
    return special.logit(p)[()]


@dataclass(frozen=True)
class NewtonConfig:
    """
    Settings for `newton_solve`.

    Attributes
    ----------
    tolerance : float
        Convergence threshold on ``|f(x)|``.
    max_iter : int
        Maximum number of Newton iterations.
    damping : bool
        If True, a step is repeatedly shrunk by ``damping_factor`` while it
        does not decrease ``|f|`` (at most ``max_halvings`` times).
    damping_factor : float
        Step shrink factor in (0, 1).
    max_halvings : int
        Maximum number of shrinks per iteration.
    """

    tolerance: float = 1e-10
    max_iter: int = 100
    damping: bool = True
    damping_factor: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ParameterError("Newton tolerance must be positive.")
        if self.max_iter < 1:
            raise ParameterError("Newton max_iter must be at least 1.")
        if not 0 < self.damping_factor < 1:
            raise ParameterError("Newton damping factor must lie in (0, 1).")


def newton_solve(f: Callable, df: Callable, x0, cfg: Optional[NewtonConfig] = None):
    """
    Solve ``f(x) = 0`` by (damped) Newton-Raphson iteration.

    The solver works elementwise on arrays: ``f`` and ``df`` must map an array
    of iterates to arrays of the same shape, each element being an independent
    scalar problem.  Iteration stops once every element satisfies
    ``|f(x)| <= cfg.tolerance``.

    Parameters
    ----------
    f : callable
        The function whose root is sought.
    df : callable
        Its derivative.
    x0 : float or array
        Starting point(s).
    cfg : `NewtonConfig`, optional
        Solver settings, defaults to ``NewtonConfig()``.

    Returns
    -------
    response : float or array
        The root(s).

    Raises
    ------
    NonConvergenceError
        When ``max_iter`` is exhausted, or an iterate, a residual or a step
        becomes non-finite.  The error carries the last iterate and residual.
    """

    cfg = cfg or NewtonConfig()

    x = np.array(x0, dtype=float)
    fx = np.asarray(f(x), dtype=float)

    for iteration in range(cfg.max_iter + 1):
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(fx))):
            raise NonConvergenceError("Newton-Raphson produced a non-finite iterate.",
                                      last_iterate=x[()], residual=fx[()])

        active = np.abs(fx) > cfg.tolerance
        if not np.any(active):
            return x[()]
        if iteration == cfg.max_iter:
            break

        slope = np.asarray(df(x), dtype=float)
        with np.errstate(divide='ignore', invalid='ignore'):
            step = np.where(active, fx / slope, 0.0)
        if not np.all(np.isfinite(step)):
            raise NonConvergenceError("Newton-Raphson hit a zero or non-finite derivative.",
                                      last_iterate=x[()], residual=fx[()])

        x_new = x - step
        f_new = np.asarray(f(x_new), dtype=float)
        if cfg.damping:
            for _ in range(cfg.max_halvings):
                worse = active & ~(np.abs(f_new) < np.abs(fx))
                if not np.any(worse):
                    break
                step = np.where(worse, step * cfg.damping_factor, step)
                x_new = x - step
                f_new = np.asarray(f(x_new), dtype=float)

        x, fx = x_new, f_new

    raise NonConvergenceError(f"Newton-Raphson did not converge in {cfg.max_iter} iterations "
                              f"(max |f| = {np.max(np.abs(fx)):.3e}).",
                              last_iterate=x[()], residual=fx[()])


def sample_strata_pair(mean0, mean1, var, rho, interval: Interval, count: int, seed: SeedLike):
    """
    Draw bivariate normal pairs conditioned on their difference lying in an interval.

    The pair ``(m0, m1)`` has means ``(mean0, mean1)``, common variance ``var``
    and correlation ``rho``.  The difference ``D = m1 - m0`` is drawn from its
    truncated normal law by the inverse-CDF method, then ``m0`` is drawn from
    its conditional normal given ``D``.

    Parameters
    ----------
    mean0, mean1 : float
        Marginal means.
    var : float
        Common marginal variance, positive.
    rho : float
        Correlation, ``|rho| < 1``.
    interval : `Interval`
        Truncation region for ``m1 - m0``.
    count : int
        Number of pairs.
    seed : int, tuple or `~numpy.random.Generator`
        Random stream.

    Returns
    -------
    response : tuple of `~numpy.ndarray`
        ``(m0, m1)``, each of length ``count``.
    """

    if not var > 0:
        raise ParameterError(f"Mediator variance must be positive, got {var}.")
    if not abs(rho) < 1:
        raise ParameterError(f"Copula correlation must satisfy |rho| < 1, got {rho}.")
    if count < 1:
        raise ParameterError("count must be at least 1.")

    mean_diff = mean1 - mean0
    sd_diff = np.sqrt(2.0 * (1.0 - rho) * var)
    a = (interval.lower - mean_diff) / sd_diff
    b = (interval.upper - mean_diff) / sd_diff

    mass = normal_interval_mass(a, b)
    if mass < MIN_STRATUM_MASS:
        raise DegenerateStratumError(f"Stratum {interval} has probability {mass:.3e} under the difference law.",
                                     probability=mass)

    rng = make_rng(seed)
    diff = stats.truncnorm.ppf(rng.random(count), a, b, loc=mean_diff, scale=sd_diff)
    diff = np.clip(diff, interval.lower, interval.upper)

    # m0 | D is normal with mean mean0 - (D - mean_diff)/2 and variance var*(1 + rho)/2
    m0 = mean0 - 0.5 * (diff - mean_diff) + np.sqrt(0.5 * var * (1.0 + rho)) * rng.standard_normal(count)
    return m0, m0 + diff
