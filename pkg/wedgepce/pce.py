# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Principal causal effects over strata of the mediator change.

For a posterior draw, a period ``t`` and a cross-world correlation ``rho``,
the potential mediators ``(M(0), M(1))`` follow a bivariate normal law.  The
stratum ``M(1) - M(0) in I`` has a closed-form probability; the effect within
it is a Monte Carlo mean over pairs drawn from the law conditioned on the
stratum, with the stratum intercepts ``Delta(m, z)`` solved from the
convolution equation that links them to the observed conditional outcome
mean.
"""

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from time import time
from typing import Optional, Sequence, Tuple

import numpy as np
from astropy import log
from astropy.table import Table, vstack
from scipy.interpolate import PchipInterpolator

from .calibration import SensitivityConfig
from .exceptions import (DataWarning, DegenerateStratumError, NumericError, ParameterError, PceError,
                         SamplerWarning)
from .model import ModelParams
from .utils.numerics import (Interval, NewtonConfig, expit, expit_derivative, gauss_hermite_rule,
                             ghq_expectation, logit, make_rng, newton_solve, normal_interval_mass,
                             sample_strata_pair)
from .utils.utils import read_json, run_threaded, write_json

__all__ = ['PceQuery', 'JointMediatorLaw', 'PceDrawResult', 'PceEstimate', 'default_intervals',
           'joint_mediator_law', 'strata_probability', 'conditional_outcome_mean', 'solve_delta',
           'pce_for_draw', 'pce_posterior', 'delta_sweep']

LINKS = ('logit', 'identity')
MIN_DENOMINATOR = 1e-8
MIN_MC_SIZE = 100
DELTA_GRID_SIZE = 512
DEFAULT_DELTAS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
_PROB_FLOOR = np.finfo(float).tiny
_PROB_CEIL = np.nextafter(1.0, 0.0)


def default_intervals(cutoff=0.5):
    """
    The three-stratum partition for a cutoff ``delta > 0``:
    ``I1 = [-delta, delta]`` (mediator nearly unchanged), ``I2 = (-inf, -delta)``
    and ``I3 = (delta, inf)``.
    """

    if not cutoff > 0:
        raise ParameterError(f"Cutoff must be positive, got {cutoff}.")
    return (Interval(-cutoff, cutoff, "I1"), Interval(-np.inf, -cutoff, "I2"), Interval(cutoff, np.inf, "I3"))


@dataclass(frozen=True)
class PceQuery:
    """
    What to compute for each posterior draw.

    Attributes
    ----------
    periods : tuple of int
        Periods ``t`` (outcome periods); empty means all outcome periods of the draws.
    intervals : tuple of `~wedgepce.utils.numerics.Interval`
        Strata of ``M(1) - M(0)``, default `default_intervals` at 0.5.
    mc_size : int
        Pairs per (draw, rho, interval, period).
    link : {'logit', 'identity'}
        Link of the structural outcome model.
    quadrature_order : int
        Gauss-Hermite order.
    seed : int, optional
        Root seed of all task streams.
    rho : float, optional
        Correlation used by `pce_for_draw` when none is passed.
    exact_delta : bool
        Solve the intercept at every sampled mediator instead of interpolating.
    max_failure_rate : float
        Fraction of failed tasks above which `pce_posterior` raises.
    """

    periods: Tuple[int, ...] = ()
    intervals: Tuple[Interval, ...] = field(default_factory=default_intervals)
    mc_size: int = 2000
    link: str = 'logit'
    quadrature_order: int = 20
    seed: Optional[int] = None
    rho: Optional[float] = None
    exact_delta: bool = False
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.mc_size < MIN_MC_SIZE:
            raise ParameterError(f"mc_size must be at least {MIN_MC_SIZE}, got {self.mc_size}.")
        if self.link not in LINKS:
            raise ParameterError(f"Unknown link {self.link!r}; expected one of {LINKS}.")
        if not self.intervals:
            raise ParameterError("At least one interval is required.")
        if self.rho is not None and not -1 < self.rho < 1:
            raise ParameterError(f"rho must lie in (-1, 1), got {self.rho}.")
        gauss_hermite_rule(self.quadrature_order)
        object.__setattr__(self, 'periods', tuple(int(t) for t in self.periods))
        object.__setattr__(self, 'intervals', tuple(self.intervals))

    @property
    def rule(self):
        return gauss_hermite_rule(self.quadrature_order)


@dataclass(frozen=True)
class JointMediatorLaw:
    """
    Bivariate normal law of ``(M(0), M(1))`` at one period.

    Both margins share the variance ``var``; ``rho`` is the cross-world correlation.
    """

    mean0: float
    mean1: float
    var: float
    rho: float

    def __post_init__(self):
        if not self.var > 0:
            raise ParameterError(f"Mediator variance must be positive, got {self.var}.")
        if not -1 < self.rho < 1:
            raise ParameterError(f"The copula correlation must satisfy |rho| < 1, got {self.rho}.")

    def mean(self, z):
        return self.mean1 if z == 1 else self.mean0

    @property
    def difference_sd(self):
        """Standard deviation of ``M(1) - M(0)``."""
        return float(np.sqrt(2.0 * (1.0 - self.rho) * self.var))

    def conditional(self, m, z):
        """Mean and variance of ``M(1 - z)`` given ``M(z) = m``."""
        mean = self.mean(1 - z) + self.rho * (np.asarray(m, dtype=float) - self.mean(z))
        return mean, (1.0 - self.rho**2) * self.var


def joint_mediator_law(p: ModelParams, t, rho) -> JointMediatorLaw:
    """
    Joint law of the potential mediators at period ``t`` under correlation ``rho``.

    ``mean0 = eta1_t``, ``mean1 = eta1_t + gamma1`` and the common variance is
    the marginal mediator variance of the model.
    """

    mean0 = p.eta1_at(t) + ModelParams.gamma0
    return JointMediatorLaw(mean0=mean0, mean1=mean0 + p.gamma1, var=p.mediator_variance, rho=rho)


def strata_probability(law: JointMediatorLaw, interval: Interval):
    """Probability that ``M(1) - M(0)`` falls in ``interval``."""

    shift = law.mean1 - law.mean0
    sd = law.difference_sd
    return float(normal_interval_mass((interval.lower - shift) / sd, (interval.upper - shift) / sd))


def conditional_outcome_mean(p: ModelParams, t, m, z, rule=None):
    """
    Observed conditional outcome mean ``E(Y_t | M_t = m, treatment z from t)``.

    The outcome random effects given the mediator are normal with mean
    ``c / v (m - mu_z)`` and variance ``s22 - c^2 / v`` (``c`` the
    mediator-outcome covariance, ``v`` the mediator variance); the logistic
    mean is integrated over them by Gauss-Hermite quadrature.

    Parameters
    ----------
    p : `~wedgepce.model.ModelParams`
    t : int
        An outcome period.
    m : float or array
        Mediator value(s).
    z : {0, 1}
    rule : `~wedgepce.utils.numerics.GaussHermiteRule`, optional
        Default: 20 nodes.

    Returns
    -------
    response : float or array
        Values in the open interval (0, 1).
    """

    rule = rule or gauss_hermite_rule(20)
    m = np.asarray(m, dtype=float)
    v = p.mediator_variance
    c = p.mediator_outcome_covariance
    cond_var = p.outcome_effect_variance - c**2 / v
    if cond_var < -1e-12:
        raise NumericError(f"Random-effect covariance is inconsistent (conditional variance {cond_var:.3e}).")
    cond_var = max(cond_var, 0.0)

    b1, b2, b3, _ = p.beta
    mu_z = p.eta1_at(t) + ModelParams.gamma0 + p.gamma1 * z
    lin = p.eta2_at(t) + ModelParams.beta0 + b1 * z + b2 * m + b3 * m * z
    value = ghq_expectation(rule, lin + c / v * (m - mu_z), cond_var, expit)
    return np.clip(value, _PROB_FLOOR, _PROB_CEIL)[()]


def solve_delta(p: ModelParams, t, m, z, lambda_z, law: JointMediatorLaw, link='logit', rule=None,
                cfg: Optional[NewtonConfig] = None, closed_form=True, outcome_mean=None):
    """
    Stratum intercept ``Delta(m, z)`` from the convolution equation.

    ``Delta`` solves ``E[g^-1(Delta + lambda_z M*)] = E(Y | m, z)`` where
    ``M*`` is ``M(1 - z)`` given ``M(z) = m``.  The logit link is solved by
    Newton-Raphson with Gauss-Hermite integrals, starting from
    ``logit(E(Y | m, z)) - lambda_z E(M* | m)``; the identity link has the
    closed form ``E(Y | m, z) - lambda_z E(M* | m)``.

    Parameters
    ----------
    p : `~wedgepce.model.ModelParams`
    t : int
    m : float or array
    z : {0, 1}
    lambda_z : float
    law : `JointMediatorLaw`
    link : {'logit', 'identity'}
    rule : `~wedgepce.utils.numerics.GaussHermiteRule`, optional
    cfg : `~wedgepce.utils.numerics.NewtonConfig`, optional
    closed_form : bool
        For the identity link, use the closed form (default) or the Newton path.
    outcome_mean : float or array, optional
        Precomputed ``E(Y | m, z)``.

    Returns
    -------
    response : float or array
    """

    if link not in LINKS:
        raise ParameterError(f"Unknown link {link!r}; expected one of {LINKS}.")
    rule = rule or gauss_hermite_rule(20)
    m = np.asarray(m, dtype=float)
    target = conditional_outcome_mean(p, t, m, z, rule) if outcome_mean is None else outcome_mean
    cmean, cvar = law.conditional(m, z)
    shift = lambda_z * cmean
    spread = lambda_z**2 * cvar

    if link == 'identity':
        if closed_form:
            return (target - shift)[()]

        def f(delta):
            return ghq_expectation(rule, delta + shift, spread, lambda x: x) - target

        return newton_solve(f, lambda delta: np.ones_like(delta), np.zeros_like(m), cfg)

    def f(delta):
        return ghq_expectation(rule, delta + shift, spread, expit) - target

    def df(delta):
        return ghq_expectation(rule, delta + shift, spread, expit_derivative)

    return newton_solve(f, df, logit(target) - shift, cfg)


@dataclass(frozen=True)
class PceDrawResult:
    """Effect within one stratum for one draw."""

    numerator: float
    denominator: float
    pce: float
    mc_se: float
    n_pairs: int


def _delta_at(p, t, m, z, lambda_z, law, query):
    """Intercepts at the sampled mediators, interpolated from a grid unless exact."""

    rule = query.rule
    lo, hi = float(np.min(m)), float(np.max(m))
    if query.exact_delta or not hi - lo > 1e-12:
        return solve_delta(p, t, m, z, lambda_z, law, query.link, rule)
    grid = np.linspace(lo, hi, DELTA_GRID_SIZE)
    values = solve_delta(p, t, grid, z, lambda_z, law, query.link, rule)
    return PchipInterpolator(grid, values)(m)


def pce_for_draw(p: ModelParams, query: PceQuery, lambda0, lambda1, interval: Interval, rho=None, period=None,
                 seed=None, context=None) -> PceDrawResult:
    """
    Principal causal effect in one stratum for one parameter draw.

    Parameters
    ----------
    p : `~wedgepce.model.ModelParams`
    query : `PceQuery`
    lambda0, lambda1 : float
        Sensitivity slopes.
    interval : `~wedgepce.utils.numerics.Interval`
    rho : float, optional
        Cross-world correlation, default ``query.rho``.
    period : int, optional
        Default: the first of ``query.periods``.
    seed : int, tuple or `~numpy.random.Generator`, optional
        Default ``query.seed``.
    context : dict, optional
        Identifies the task in error messages.

    Returns
    -------
    response : `PceDrawResult`
        ``denominator`` is the stratum probability, ``pce`` the conditional
        mean effect and ``numerator = denominator * pce``.
    """

    rho = query.rho if rho is None else rho
    if rho is None:
        raise ParameterError("A cross-world correlation is required.")
    if period is None:
        if not query.periods:
            raise ParameterError("A period is required.")
        period = query.periods[0]
    seed = query.seed if seed is None else seed

    law = joint_mediator_law(p, period, rho)
    denominator = strata_probability(law, interval)
    if denominator <= MIN_DENOMINATOR:
        info = {"period": period, "interval": interval.label, "rho": rho}
        info.update(context or {})
        raise DegenerateStratumError(f"Stratum probability {denominator:.3e} is too small", probability=denominator,
                                     context=info)

    m0, m1 = sample_strata_pair(law.mean0, law.mean1, law.var, rho, interval, query.mc_size, make_rng(seed))
    delta1 = _delta_at(p, period, m1, 1, lambda1, law, query)
    delta0 = _delta_at(p, period, m0, 0, lambda0, law, query)

    inverse_link = expit if query.link == 'logit' else np.asarray
    h = np.asarray(inverse_link(delta1 + lambda1 * m0)) - np.asarray(inverse_link(delta0 + lambda0 * m1))
    value = float(h.mean())
    return PceDrawResult(numerator=denominator * value, denominator=denominator, pce=value,
                         mc_se=float(h.std(ddof=1) / np.sqrt(len(h))), n_pairs=len(h))


PCE_COLUMNS = ('period', 'interval', 'rho', 'draw', 'lambda0', 'lambda1', 'numerator', 'denominator', 'pce',
               'mc_se')


class PceEstimate():
    """
    Posterior samples of the principal causal effects.

    Parameters
    ----------
    table : `~astropy.table.Table`
        Long format, one row per (period, interval, rho, draw) and, for cutoff
        sweeps, a leading ``delta`` column.
    intervals : sequence of `~wedgepce.utils.numerics.Interval`
    failures : list of dict
        Tasks that were skipped, with their error message.
    """

    def __init__(self, table, intervals=(), failures=()):
        self.table = table
        self.intervals = list(intervals)
        self.failures = list(failures)

    def __len__(self):
        return len(self.table)

    def __repr__(self):
        return f"<PceEstimate: {len(self)} draw-level rows, {len(self.failures)} failures>"

    @property
    def keys(self):
        keys = ['period', 'interval', 'rho']
        return (['delta'] + keys) if 'delta' in self.table.colnames else keys

    def summary(self):
        """
        Posterior mean and central 95% credible interval per (period, interval, rho).

        Returns
        -------
        response : `~astropy.table.Table`
        """

        names = self.keys + ['n_draws', 'mean', 'q025', 'q975', 'denominator']
        out = Table(names=names, dtype=[float if k in ('rho', 'delta') else int if k == 'period' else str
                                        for k in self.keys] + [int, float, float, float, float])
        if not len(self.table):
            return out
        grouped = self.table.group_by(self.keys)
        for key, group in zip(grouped.groups.keys, grouped.groups):
            pce = np.asarray(group['pce'], dtype=float)
            q025, q975 = np.quantile(pce, [0.025, 0.975])
            out.add_row([key[k] for k in self.keys]
                        + [len(group), pce.mean(), q025, q975, float(np.mean(group['denominator']))])
        return out

    def summary_records(self):
        records = []
        for row in self.summary():
            record = {k: (float(row[k]) if k in ('rho', 'delta', 'mean', 'q025', 'q975', 'denominator')
                          else int(row[k]) if k in ('period', 'n_draws') else str(row[k]))
                      for k in row.colnames}
            records.append(record)
        return records

    def plot_data(self):
        """
        Series for plotting credible intervals: x is the period (or the
        cutoff for sweeps), one series per (rho, interval) and, for sweeps,
        per period.
        """

        x_name = 'delta' if 'delta' in self.table.colnames else 'period'
        series_keys = [k for k in self.keys if k != x_name]
        summary = self.summary()
        series = []
        if len(summary):
            grouped = summary.group_by(series_keys)
            for key, group in zip(grouped.groups.keys, grouped.groups):
                group = group[np.argsort(group[x_name], kind='stable')]
                entry = {k: (float(key[k]) if k == 'rho' else int(key[k]) if k == 'period' else str(key[k]))
                         for k in series_keys}
                entry.update({"x": np.asarray(group[x_name]).tolist(), "mean": np.asarray(group['mean']).tolist(),
                              "q025": np.asarray(group['q025']).tolist(),
                              "q975": np.asarray(group['q975']).tolist()})
                series.append(entry)
        return {"x": x_name, "y": "pce", "series": series,
                "intervals": [i.to_dict() for i in self.intervals]}

    def write(self, workspace, prefix='pce'):
        """
        Write ``<prefix>.csv``, ``<prefix>_summary.json`` and ``<prefix>_plot.json``.

        Returns
        -------
        response : list of str
        """

        workspace = Path(workspace)
        csv_path = workspace / f"{prefix}.csv"
        formats = {name: '%.17g' for name in self.table.colnames
                   if self.table[name].dtype.kind == 'f'}
        self.table.write(csv_path, format='ascii.csv', formats=formats, overwrite=True)
        summary = {"summary": self.summary_records(), "failures": self.failures,
                   "intervals": [i.to_dict() for i in self.intervals]}
        return [str(csv_path), write_json(summary, workspace / f"{prefix}_summary.json"),
                write_json(self.plot_data(), workspace / f"{prefix}_plot.json")]

    @classmethod
    def read(cls, workspace, prefix='pce'):
        workspace = Path(workspace)
        table = Table.read(workspace / f"{prefix}.csv", format='ascii.csv')
        summary = read_json(workspace / f"{prefix}_summary.json", artifact="PCE summary")
        intervals = [Interval(i["lower"], i["upper"], i["label"]) for i in summary.get("intervals", [])]
        return cls(table, intervals=intervals, failures=summary.get("failures", []))


def _draw_tasks(params, index, lambda0, lambda1, combos, query):
    rows, failures = [], []
    for grid_index, (rho, interval, period) in enumerate(combos):
        context = {"draw": index, "rho": rho, "interval": interval.label, "period": period}
        try:
            result = pce_for_draw(params, query, lambda0, lambda1, interval, rho=rho, period=period,
                                  seed=(query.seed, index, grid_index), context={"draw": index})
        except (NumericError, ParameterError) as err:
            context["error"] = str(err)
            failures.append(context)
            continue
        rows.append((period, interval.label, rho, index, lambda0, lambda1, result.numerator, result.denominator,
                     result.pce, result.mc_se))
    return rows, failures


def _check_draws(draws):
    if draws.layout is None:
        raise ParameterError("Posterior draws carry no parameter layout.")
    if draws.metadata.get("mediator_lag", 0) == 1:
        raise ParameterError("Draws fitted with a lagged mediator cannot be used for PCE computation.")
    if draws.divergence_rate > 0.2:
        warnings.warn(f"Draws have a divergence rate of {draws.divergence_rate:.1%}.", SamplerWarning)


def pce_posterior(draws, cfg: SensitivityConfig, query: PceQuery, threads=1, verbose=False) -> PceEstimate:
    """
    Posterior of the principal causal effects over the sensitivity grid.

    Every posterior draw is paired with one ``(lambda0, lambda1)`` draw from
    the sensitivity rule and evaluated for each correlation of the grid, each
    interval and each period.  Task ``g`` of draw ``k`` samples from the
    stream keyed ``(seed, k, g)``, so results do not depend on scheduling.

    Parameters
    ----------
    draws : `~wedgepce.sampler.PosteriorDraws`
    cfg : `~wedgepce.calibration.SensitivityConfig`
    query : `PceQuery`
        Must carry a seed.
    threads : int, "auto"
        Threads over posterior draws.
    verbose : bool
        If True, log progress and timing.

    Returns
    -------
    response : `PceEstimate`

    Raises
    ------
    PceError
        If more than ``query.max_failure_rate`` of the tasks fail.
    """

    if verbose:
        start_time = time()
    if query.seed is None:
        raise ParameterError("PceQuery.seed is required.")
    _check_draws(draws)

    periods = query.periods or draws.layout.outcome_periods
    combos = [(rho, interval, int(t)) for rho in cfg.rho_grid for interval in query.intervals for t in periods]
    lambda0, lambda1 = cfg.draw_lambda(len(draws), (query.seed,))
    if verbose:
        log.info(f"Computing {len(draws)} draws x {len(combos)} (rho, interval, period) settings")

    results = run_threaded(
        lambda k: _draw_tasks(draws.params(k), k, float(lambda0[k]), float(lambda1[k]), combos, query),
        range(len(draws)), threads)

    rows = [row for chunk, _ in results for row in chunk]
    failures = [f for _, chunk in results for f in chunk]
    n_tasks = len(draws) * len(combos)
    if failures:
        warnings.warn(f"Skipped {len(failures)} of {n_tasks} PCE tasks: {failures[0]['error']}", DataWarning)
    if len(failures) > query.max_failure_rate * n_tasks:
        raise PceError(f"{len(failures)} of {n_tasks} PCE tasks failed "
                       f"(more than {query.max_failure_rate:.0%}); first failure: {failures[0]['error']}")

    interval_order = {interval.label: k for k, interval in enumerate(query.intervals)}
    rho_order = {rho: k for k, rho in enumerate(cfg.rho_grid)}
    rows.sort(key=lambda r: (r[0], interval_order[r[1]], rho_order[r[2]], r[3]))

    table = Table(rows=rows if rows else None, names=PCE_COLUMNS,
                  dtype=(int, str, float, int, float, float, float, float, float, float))
    if verbose:
        log.info(f"PCE time: {time() - start_time:.2} sec")
    return PceEstimate(table, intervals=query.intervals, failures=failures)


def delta_sweep(draws, cfg: SensitivityConfig, query: PceQuery, deltas: Sequence[float] = DEFAULT_DELTAS,
                threads=1, verbose=False) -> PceEstimate:
    """
    `pce_posterior` over the default partition for a range of cutoffs.

    Returns
    -------
    response : `PceEstimate`
        With a leading ``delta`` column; intervals keep their ``I1..I3`` labels.
    """

    tables, failures = [], []
    for delta in deltas:
        estimate = pce_posterior(draws, cfg, replace(query, intervals=default_intervals(delta)), threads=threads,
                                 verbose=verbose)
        table = estimate.table
        table.add_column(np.full(len(table), float(delta)), name='delta', index=0)
        tables.append(table)
        failures.extend(dict(f, delta=float(delta)) for f in estimate.failures)
    return PceEstimate(vstack(tables), intervals=default_intervals(deltas[0]), failures=failures)
