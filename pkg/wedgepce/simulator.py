# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Synthetic stepped-wedge trials drawn from the observed-data model, monotone
MAR dropout, and a brute-force oracle for the principal causal effect under
known truth.
"""

import warnings
from dataclasses import dataclass
from time import time
from typing import Optional, Tuple

import numpy as np
from astropy import log
from astropy.table import MaskedColumn, Table
from scipy import special
from scipy.integrate import trapezoid
from scipy.stats import norm

from .exceptions import DataWarning, DegenerateStratumError, NonConvergenceError, ParameterError
from .model import ModelParams, cholesky_factor
from .trial_data import TrialDataset
from .utils.numerics import Interval, make_rng

__all__ = ['DesignSpec', 'TruthParams', 'OracleResult', 'simulate_trial', 'apply_dropout', 'true_pce_oracle']

ORACLE_MIN_MC_SIZE = 10_000
ORACLE_MIN_STRATUM_MASS = 1e-6


@dataclass(frozen=True)
class DesignSpec:
    """
    Layout of a closed-cohort stepped-wedge trial.

    Attributes
    ----------
    n_clusters : int
        Number of clusters J.
    n_periods : int
        Number of periods T (period 1 is the baseline).
    cohort_size : int
        Individuals per cluster.
    start_periods : tuple of int, optional
        First treated period of each cluster, each in ``2..T``.  Defaults to
        the staircase schedule (see `staircase`).
    dropout_hazard : float
        Per-period dropout probability in [0, 1), applied from period 2 on.
    dropout_slope : float
        Change of the logit dropout hazard per unit of the previous outcome.
    baseline_outcome_prob : float
        Outcome rate at periods that have no outcome model.
    """

    n_clusters: int = 8
    n_periods: int = 5
    cohort_size: int = 30
    start_periods: Optional[Tuple[int, ...]] = None
    dropout_hazard: float = 0.0
    dropout_slope: float = 0.0
    baseline_outcome_prob: float = 0.2

    def __post_init__(self):

        if self.n_clusters < 1 or self.cohort_size < 1:
            raise ParameterError("A design needs at least one cluster and one individual per cluster.")
        if self.n_periods < 2:
            raise ParameterError("A stepped-wedge design needs at least two periods.")
        if not 0 <= self.dropout_hazard < 1:
            raise ParameterError(f"Dropout hazard must lie in [0, 1), got {self.dropout_hazard}.")
        if not 0 <= self.baseline_outcome_prob <= 1:
            raise ParameterError(f"baseline_outcome_prob must lie in [0, 1], got {self.baseline_outcome_prob}.")

        if self.start_periods is None or len(self.start_periods) == 0:
            starts = self.staircase(self.n_clusters, self.n_periods)
        else:
            starts = tuple(int(s) for s in self.start_periods)
        if len(starts) != self.n_clusters:
            raise ParameterError(f"{len(starts)} start periods given for {self.n_clusters} clusters.")
        if any(not 2 <= s <= self.n_periods for s in starts):
            raise ParameterError(f"Start periods must lie in 2..{self.n_periods}, got {starts}.")
        object.__setattr__(self, 'start_periods', starts)

    @staticmethod
    def staircase(n_clusters, n_periods):
        """
        Start periods spread evenly over ``2..T``: cluster ``j`` (0-based)
        starts at ``2 + floor(j (T - 1) / J)``.  Eight clusters over five
        periods give two clusters per step.
        """
        return tuple(2 + (j * (n_periods - 1)) // n_clusters for j in range(n_clusters))

    def treatment(self, cluster, period):
        """Treatment indicator of cluster ``cluster`` (0-based) at ``period``."""
        return int(period >= self.start_periods[cluster])

    @property
    def schedule(self):
        """``(J, T)`` array of treatment indicators."""
        periods = np.arange(1, self.n_periods + 1)
        return (periods[None, :] >= np.array(self.start_periods)[:, None]).astype(int)

    def to_dict(self):
        return {"n_clusters": self.n_clusters, "n_periods": self.n_periods, "cohort_size": self.cohort_size,
                "start_periods": list(self.start_periods), "dropout_hazard": self.dropout_hazard,
                "dropout_slope": self.dropout_slope, "baseline_outcome_prob": self.baseline_outcome_prob}


@dataclass(frozen=True)
class TruthParams:
    """
    Ground truth for simulation: model parameters plus the cross-world
    correlation ``rho`` and the sensitivity slopes ``lambda0``, ``lambda1``
    (used only by the oracle).
    """

    params: ModelParams
    rho: float = 0.5
    lambda0: float = 0.0
    lambda1: float = 0.0

    def __post_init__(self):
        if not abs(self.rho) <= 1:
            raise ParameterError(f"Cross-world correlation must lie in [-1, 1], got {self.rho}.")
        # raises ParameterError for negative scales or |rho| > 1
        cholesky_factor(*self.params.sigma_alpha, self.params.rho_alpha)
        cholesky_factor(*self.params.sigma_phi, self.params.rho_phi)

    def to_dict(self):
        out = self.params.to_dict()
        out.update({"rho": self.rho, "lambda0": self.lambda0, "lambda1": self.lambda1})
        return out

    @classmethod
    def from_dict(cls, values):
        return cls(ModelParams.from_dict(values), rho=values.get("rho", 0.5),
                   lambda0=values.get("lambda0", 0.0), lambda1=values.get("lambda1", 0.0))


def _identifiers(prefix, count, min_width):
    width = max(min_width, len(str(count)))
    return [f"{prefix}{k + 1:0{width}d}" for k in range(count)]


def simulate_trial(design: DesignSpec, truth: TruthParams, seed, mediator_lag=0, verbose=False) -> TrialDataset:
    """
    Draw a complete trial (then apply the design's dropout).

    Cluster effects are drawn per cluster, individual effects per individual
    and residuals per observation; ``M`` follows the mediator model and ``Y``
    is Bernoulli with the outcome model's probability at the outcome
    periods (``baseline_outcome_prob`` elsewhere).

    Parameters
    ----------
    design : `DesignSpec`
    truth : `TruthParams`
    seed : int, tuple or `~numpy.random.Generator`
        The output is a deterministic function of the seed.
    mediator_lag : {0, 1}
        Whether the outcome model uses the current or the previous mediator.
    verbose : bool
        If True, log progress and timing.

    Returns
    -------
    response : `~wedgepce.trial_data.TrialDataset`
    """

    if verbose:
        start_time = time()

    params = truth.params
    if params.n_periods != design.n_periods:
        raise ParameterError(f"Truth has {params.n_periods} periods but the design has {design.n_periods}.")
    if mediator_lag not in (0, 1):
        raise ParameterError(f"mediator_lag must be 0 or 1, got {mediator_lag}.")
    if mediator_lag == 1 and 1 in params.outcome_periods:
        raise ParameterError("A lagged mediator cannot be used at period 1.")

    rng = make_rng(seed)
    n_clusters, n_periods, cohort = design.n_clusters, design.n_periods, design.cohort_size
    n_individuals = n_clusters * cohort

    alpha = rng.standard_normal((n_clusters, 2)) @ cholesky_factor(*params.sigma_alpha, params.rho_alpha).T
    phi = rng.standard_normal((n_individuals, 2)) @ cholesky_factor(*params.sigma_phi, params.rho_phi).T
    eps = params.sigma_eps * rng.standard_normal((n_individuals, n_periods))
    uniforms = rng.random((n_individuals, n_periods))

    cluster_of = np.repeat(np.arange(n_clusters), cohort)
    z = design.schedule[cluster_of]
    z_lag = np.column_stack([np.zeros(n_individuals, dtype=int), z[:, :-1]])

    mediator = params.eta1[None, :] + params.gamma1 * z + alpha[cluster_of, :1] + phi[:, :1] + eps

    b1, b2, b3, b4 = params.beta
    prob = np.full((n_individuals, n_periods), design.baseline_outcome_prob)
    for t in params.outcome_periods:
        k = t - 1
        mstar = mediator[:, k] if mediator_lag == 0 else mediator[:, k - 1]
        lin = (params.eta2_at(t) + b1 * z[:, k] + b2 * mstar + b3 * z[:, k] * mstar + b4 * z_lag[:, k] * mstar
               + alpha[cluster_of, 1] + phi[:, 1])
        prob[:, k] = special.expit(lin)
    outcome = (uniforms < prob).astype(int)

    cluster_ids = _identifiers("c", n_clusters, 2)
    individual_ids = _identifiers("i", cohort, 3)

    table = Table()
    table['cluster_id'] = np.repeat([cluster_ids[j] for j in cluster_of], n_periods)
    table['individual_id'] = np.repeat([individual_ids[i % cohort] for i in range(n_individuals)], n_periods)
    table['period'] = np.tile(np.arange(1, n_periods + 1), n_individuals)
    table['treatment'] = z.ravel()
    table['mediator'] = MaskedColumn(mediator.ravel(), mask=np.zeros(mediator.size, dtype=bool))
    table['outcome'] = MaskedColumn(outcome.ravel(), mask=np.zeros(outcome.size, dtype=bool))
    data = TrialDataset(table, n_periods=n_periods)

    if design.dropout_hazard > 0:
        data = apply_dropout(data, design.dropout_hazard, rng, slope=design.dropout_slope)

    if verbose:
        log.info(f"Simulated {n_clusters} clusters x {cohort} individuals x {n_periods} periods "
                 f"in {time() - start_time:.2} sec")
    return data


def apply_dropout(data: TrialDataset, hazard, seed, slope=0.0) -> TrialDataset:
    """
    Impose monotone dropout on a trial.

    From period 2 on, every individual still in the study drops out with
    probability ``expit(logit(hazard) + slope * Y_prev)``, where ``Y_prev``
    is the outcome observed in the previous period.  From the dropout period
    onward the mediator and the outcome are missing.  Dropout depends only on
    observed history (MAR).

    Parameters
    ----------
    data : `~wedgepce.trial_data.TrialDataset`
    hazard : float
        Baseline per-period hazard in [0, 1).
    seed : int, tuple or `~numpy.random.Generator`
    slope : float
        Logit-scale dependence on the previous outcome.

    Returns
    -------
    response : `~wedgepce.trial_data.TrialDataset`
        A new dataset; ``hazard = 0`` gives a copy of ``data``.
    """

    if not 0 <= hazard < 1:
        raise ParameterError(f"Dropout hazard must lie in [0, 1), got {hazard}.")
    if hazard == 0:
        return TrialDataset(data.table, n_periods=data.n_periods)

    rng = make_rng(seed)
    cluster, individual, period, _, mediator, outcome = data.arrays()
    keys = np.char.add(np.char.add(cluster, "\x00"), individual)
    _, person = np.unique(keys, return_inverse=True)
    n_people, n_periods = person.max() + 1, data.n_periods

    outcome_grid = np.zeros((n_people, n_periods + 1))
    seen = ~np.isnan(outcome)
    outcome_grid[person[seen], period[seen]] = outcome[seen]

    dropout_period = np.full(n_people, n_periods + 1)
    alive = np.ones(n_people, dtype=bool)
    base = special.logit(hazard)
    for t in range(2, n_periods + 1):
        h = special.expit(base + slope * outcome_grid[:, t - 1])
        leaving = alive & (rng.random(n_people) < h)
        dropout_period[leaving] = t
        alive &= ~leaving

    gone = period >= dropout_period[person]
    table = data.table
    table['mediator'].mask = np.ma.getmaskarray(table['mediator']) | gone
    table['outcome'].mask = np.ma.getmaskarray(table['outcome']) | gone
    return TrialDataset(table, n_periods=data.n_periods)


@dataclass(frozen=True)
class OracleResult:
    """
    Brute-force PCE with its Monte Carlo standard error, the stratum
    probability and the number of accepted pairs.
    """

    value: float
    mc_se: float
    strata_probability: float
    n_accepted: int

    def __float__(self):
        return float(self.value)


def _trapezoid_normal_mean(func, mean, var, n_grid=1201, width=8.0):
    """E[func(U)] for U ~ N(mean, var) on a fixed grid of +-width sds (var may be 0)."""

    x = np.linspace(-width, width, n_grid)
    density = norm.pdf(x)
    density = density / trapezoid(density, x)
    u = np.asarray(mean)[..., None] + np.sqrt(max(var, 0.0)) * x
    return trapezoid(func(u) * density, x, axis=-1)


def true_pce_oracle(truth: TruthParams, t, interval: Interval, mc_size, seed, link='logit', grid_size=801):
    """
    Principal causal effect under known truth, by brute force.

    Pairs ``(M(0), M(1))`` are drawn from the unconditioned bivariate normal
    copula and filtered to ``M(1) - M(0)`` in ``interval``.  The conditional
    outcome means and the stratum intercepts are obtained by fine-grid
    trapezoid integration and bisection on a grid of mediator values.

    Parameters
    ----------
    truth : `TruthParams`
        Includes ``rho``, ``lambda0`` and ``lambda1``.
    t : int
        A period with an outcome model.
    interval : `~wedgepce.utils.numerics.Interval`
    mc_size : int
        Number of unconditioned pairs, at least 10 000.
    seed : int, tuple or `~numpy.random.Generator`
    link : {'logit', 'identity'}
    grid_size : int
        Number of mediator grid points for the intercepts.

    Returns
    -------
    response : `OracleResult`
    """

    if mc_size < ORACLE_MIN_MC_SIZE:
        raise ParameterError(f"Oracle mc_size must be at least {ORACLE_MIN_MC_SIZE}, got {mc_size}.")
    if link not in ('logit', 'identity'):
        raise ParameterError(f"Unknown link {link!r}.")
    if not abs(truth.rho) < 1:
        raise ParameterError("The oracle needs |rho| < 1.")

    params = truth.params
    eta2 = params.eta2_at(t)
    b1, b2, b3, _ = params.beta
    mu = np.array([params.eta1_at(t), params.eta1_at(t) + params.gamma1])
    s_alpha, s_phi = params.cov_alpha, params.cov_phi
    v = s_alpha[0, 0] + s_phi[0, 0] + params.sigma_eps**2
    c = s_alpha[0, 1] + s_phi[0, 1]
    w = s_alpha[1, 1] + s_phi[1, 1] - c**2 / v
    rho = truth.rho
    lambdas = (truth.lambda0, truth.lambda1)
    inverse_link = special.expit if link == 'logit' else (lambda x: x)

    sd_diff = np.sqrt(2.0 * (1.0 - rho) * v)
    probability = float(norm.cdf(interval.upper, loc=params.gamma1, scale=sd_diff)
                        - norm.cdf(interval.lower, loc=params.gamma1, scale=sd_diff))
    if probability < ORACLE_MIN_STRATUM_MASS:
        raise DegenerateStratumError(f"Stratum {interval} has truth probability {probability:.3e}.",
                                     probability=probability, context={"period": t, "rho": rho})

    rng = make_rng(seed)
    pairs = rng.multivariate_normal(mu, v * np.array([[1.0, rho], [rho, 1.0]]), size=int(mc_size))
    diff = pairs[:, 1] - pairs[:, 0]
    pairs = pairs[(diff >= interval.lower) & (diff <= interval.upper)]
    if len(pairs) < 2:
        raise DegenerateStratumError(f"Only {len(pairs)} oracle pairs fell in {interval}.",
                                     probability=probability)

    lo, hi = pairs.min(), pairs.max()
    m_grid = np.linspace(lo - 1e-9, hi + 1e-9, grid_size)

    def outcome_mean(m, z):
        lin = eta2 + b1 * z + b2 * m + b3 * m * z
        return _trapezoid_normal_mean(lambda u: special.expit(lin[..., None] + u), c / v * (m - mu[z]), w)

    def intercept(z):
        target = outcome_mean(m_grid, z)
        cmean = mu[1 - z] + rho * (m_grid - mu[z])
        cvar = (1.0 - rho**2) * v

        def excess(delta):
            return _trapezoid_normal_mean(lambda m: inverse_link(delta[..., None] + lambdas[z] * m),
                                          cmean, cvar) - target

        start = (special.logit(target) if link == 'logit' else target) - lambdas[z] * cmean
        lower, upper = start - 40.0, start + 40.0
        for _ in range(10):
            f_lo, f_hi = excess(lower), excess(upper)
            if np.all(f_lo <= 0) and np.all(f_hi >= 0):
                break
            lower = np.where(f_lo > 0, lower - 40.0, lower)
            upper = np.where(f_hi < 0, upper + 40.0, upper)
        else:
            raise NonConvergenceError("Oracle bisection could not bracket the intercept.")

        for _ in range(60):
            mid = 0.5 * (lower + upper)
            above = excess(mid) > 0
            upper = np.where(above, mid, upper)
            lower = np.where(above, lower, mid)
        return 0.5 * (lower + upper)

    delta0, delta1 = intercept(0), intercept(1)
    m0, m1 = pairs[:, 0], pairs[:, 1]
    h = (inverse_link(np.interp(m1, m_grid, delta1) + lambdas[1] * m0)
         - inverse_link(np.interp(m0, m_grid, delta0) + lambdas[0] * m1))

    if len(pairs) < 100:
        warnings.warn(f"Oracle kept only {len(pairs)} pairs in {interval}.", DataWarning)
    return OracleResult(value=float(h.mean()), mc_se=float(h.std(ddof=1) / np.sqrt(len(h))),
                        strata_probability=probability, n_accepted=int(len(h)))
