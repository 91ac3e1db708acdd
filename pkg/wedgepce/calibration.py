# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Calibration of the sensitivity parameters from the stepped-wedge structure.

The cross-world correlation is bounded below by the correlation of the
mediator before and after a cluster crosses over to treatment.  The
sensitivity slopes are bounded by auxiliary logistic regressions on the same
transition rows and by the outcome-model coefficients of the posterior.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from astropy import log
from scipy import special

from .exceptions import (CalibrationError, DataWarning, InputWarning, NonConvergenceError, ParameterError,
                         RankError, SeparationError)
from .trial_data import LaggedView, TrialDataset, observed_rows
from .utils.numerics import make_rng

__all__ = ['SensitivityBounds', 'SensitivityConfig', 'AuxiliaryFit', 'estimate_rho_star', 'fit_auxiliary_glm',
           'lambda_bounds', 'rho_grid', 'sample_lambda', 'calibrate', 'sensitivity_config']

MIN_TRANSITION_PAIRS = 3
IRLS_TOLERANCE = 1e-8
IRLS_MAX_ITER = 100
LAMBDA_RULES = ('triangular', 'fixed')


def _optional_float(value):
    return None if value is None else float(value)


@dataclass(frozen=True, eq=False)
class SensitivityBounds:
    """
    Calibrated ranges of the sensitivity parameters.

    Attributes
    ----------
    rho_star : float
        Pooled lower bound of the cross-world correlation.
    rho_star_by_period : dict
        Period-specific estimates (None where fewer than 3 pairs exist).
    n_transition, n_transition_by_period : int, dict
        Sizes of the transition sets.
    lambda0_lower, lambda0_upper, lambda1_lower, lambda1_upper : float
        Slope bounds per arm.
    lambda0_upper_draws, lambda1_upper_draws : array, optional
        Per-draw upper bounds (per-draw variant only).
    zeta, theta : tuple, optional
        Auxiliary regression coefficients.
    """

    rho_star: Optional[float] = None
    rho_star_by_period: Dict[int, Optional[float]] = field(default_factory=dict)
    n_transition: int = 0
    n_transition_by_period: Dict[int, int] = field(default_factory=dict)
    lambda0_lower: Optional[float] = None
    lambda0_upper: Optional[float] = None
    lambda1_lower: Optional[float] = None
    lambda1_upper: Optional[float] = None
    lambda0_upper_draws: Optional[np.ndarray] = None
    lambda1_upper_draws: Optional[np.ndarray] = None
    zeta: Optional[Tuple[float, float, float]] = None
    theta: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.rho_star is not None and not -1 <= self.rho_star <= 1:
            raise ParameterError(f"rho_star must lie in [-1, 1], got {self.rho_star}.")
        for name in ('lambda0_lower', 'lambda0_upper', 'lambda1_lower', 'lambda1_upper'):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}.")

    def arm(self, z):
        """``(lower, upper)`` slope bounds of arm ``z``."""
        if z == 0:
            return self.lambda0_lower, self.lambda0_upper
        return self.lambda1_lower, self.lambda1_upper

    def fallback(self, z):
        """``"midpoint"`` when the bounds of arm ``z`` are inverted or equal, else None."""
        lower, upper = self.arm(z)
        if lower is None or upper is None:
            return None
        return "midpoint" if lower >= upper else None

    def to_dict(self):
        def draws(values):
            return None if values is None else np.asarray(values, dtype=float).tolist()

        return {
            "rho_star": _optional_float(self.rho_star),
            "rho_star_by_period": {str(t): _optional_float(r) for t, r in self.rho_star_by_period.items()},
            "n_transition": int(self.n_transition),
            "n_transition_by_period": {str(t): int(n) for t, n in self.n_transition_by_period.items()},
            "lambda0": {"lower": _optional_float(self.lambda0_lower), "upper": _optional_float(self.lambda0_upper),
                        "fallback": self.fallback(0), "upper_draws": draws(self.lambda0_upper_draws)},
            "lambda1": {"lower": _optional_float(self.lambda1_lower), "upper": _optional_float(self.lambda1_upper),
                        "fallback": self.fallback(1), "upper_draws": draws(self.lambda1_upper_draws)},
            "zeta": None if self.zeta is None else [float(v) for v in self.zeta],
            "theta": None if self.theta is None else [float(v) for v in self.theta],
        }

    @classmethod
    def from_dict(cls, values):
        def draws(arm):
            upper = values[arm].get("upper_draws")
            return None if upper is None else np.asarray(upper, dtype=float)

        return cls(
            rho_star=values.get("rho_star"),
            rho_star_by_period={int(t): r for t, r in values.get("rho_star_by_period", {}).items()},
            n_transition=values.get("n_transition", 0),
            n_transition_by_period={int(t): n for t, n in values.get("n_transition_by_period", {}).items()},
            lambda0_lower=values["lambda0"]["lower"], lambda0_upper=values["lambda0"]["upper"],
            lambda1_lower=values["lambda1"]["lower"], lambda1_upper=values["lambda1"]["upper"],
            lambda0_upper_draws=draws("lambda0"), lambda1_upper_draws=draws("lambda1"),
            zeta=None if values.get("zeta") is None else tuple(values["zeta"]),
            theta=None if values.get("theta") is None else tuple(values["theta"]))


@dataclass(frozen=True)
class AuxiliaryFit:
    """
    Coefficients of the two auxiliary logistic regressions on the transition rows.

    ``zeta`` regresses the previous outcome and ``theta`` the current outcome
    on ``(1, M_t, M_{t-1})``.
    """

    zeta: Tuple[float, float, float]
    theta: Tuple[float, float, float]
    n_obs: int
    iterations: Tuple[int, int] = (0, 0)


def _transition_pairs(view: LaggedView):
    rows = view.transition_rows()
    return rows, rows.column('lag_mediator').astype(float), rows.column('mediator').astype(float)


def _correlation(previous, current):
    with np.errstate(invalid='ignore', divide='ignore'):
        value = np.corrcoef(previous, current)[0, 1]
    if not np.isfinite(value):
        raise CalibrationError("Mediator values on the transition set have zero variance.")
    return float(np.clip(value, -1.0, 1.0))


def estimate_rho_star(data: TrialDataset, per_period=False) -> SensitivityBounds:
    """
    Lower bound of the cross-world correlation from the transition set.

    The transition set holds the individuals of clusters that are under
    control at ``t - 1`` and treated at ``t``, with both mediator values
    observed.  The estimate is the sample correlation of
    ``(M_{t-1}, M_t)`` over that set.

    Parameters
    ----------
    data : `~wedgepce.trial_data.TrialDataset`
    per_period : bool
        Also estimate the correlation separately for each transition period.

    Returns
    -------
    response : `SensitivityBounds`
        Only the correlation fields are set.

    Raises
    ------
    CalibrationError
        If fewer than 3 pairs are available in the pooled set.
    """

    rows, previous, current = _transition_pairs(observed_rows(data))
    n_pairs = len(rows)
    if n_pairs < MIN_TRANSITION_PAIRS:
        raise CalibrationError(f"Transition set has |C| = {n_pairs} complete mediator pairs; "
                               f"at least {MIN_TRANSITION_PAIRS} are required.")
    rho_star = _correlation(previous, current)

    by_period, counts = {}, {}
    if per_period:
        periods = rows.column('period')
        for t in range(2, data.n_periods + 1):
            at_t = periods == t
            counts[t] = int(at_t.sum())
            if counts[t] < MIN_TRANSITION_PAIRS:
                if counts[t] > 0:
                    warnings.warn(f"Period {t} has only {counts[t]} transition pairs; "
                                  f"its correlation is not estimated.", DataWarning)
                by_period[t] = None
                continue
            try:
                by_period[t] = _correlation(previous[at_t], current[at_t])
            except CalibrationError:
                warnings.warn(f"Mediator values at period {t} have zero variance on the transition set.",
                              DataWarning)
                by_period[t] = None

    log.info(f"rho* = {rho_star:.4f} from {n_pairs} transition pairs")
    return SensitivityBounds(rho_star=rho_star, rho_star_by_period=by_period, n_transition=n_pairs,
                             n_transition_by_period=counts)


def _irls(design, y, tolerance=IRLS_TOLERANCE, max_iter=IRLS_MAX_ITER):
    """
    Logistic regression by iteratively reweighted least squares (Newton steps).

    Returns the coefficients and the number of iterations.
    """

    n_coef = design.shape[1]
    if design.shape[0] < n_coef or np.linalg.matrix_rank(design) < n_coef:
        raise RankError(f"Auxiliary design matrix with {design.shape[0]} rows is rank deficient.")

    coef = np.zeros(n_coef)
    norms = []
    for iteration in range(max_iter + 1):
        prob = special.expit(design @ coef)
        score = design.T @ (y - prob)
        if np.linalg.norm(score) <= tolerance:
            if np.all(np.abs(y - prob) < 1e-6):
                raise SeparationError("Fitted probabilities reach 0/1 at every observation (separation).")
            return coef, iteration
        if iteration == max_iter:
            break

        weights = prob * (1.0 - prob)
        information = design.T @ (weights[:, None] * design)
        try:
            step = np.linalg.solve(information, score)
        except np.linalg.LinAlgError:
            raise SeparationError("Auxiliary information matrix became singular (separation).")
        coef = coef + step
        norms.append(np.linalg.norm(coef))
        if not np.all(np.isfinite(coef)):
            raise SeparationError("Auxiliary coefficients diverged (separation).")

    if len(norms) > 10 and norms[-1] > norms[-10] + 1.0:
        raise SeparationError(f"Auxiliary coefficient norm keeps growing ({norms[-1]:.3g}); "
                              f"the outcome is separated by the mediators.")
    raise NonConvergenceError(f"IRLS did not converge in {max_iter} iterations.", last_iterate=coef,
                              residual=float(np.linalg.norm(score)))


def fit_auxiliary_glm(view: LaggedView) -> AuxiliaryFit:
    """
    Fit the auxiliary logistic regressions on the transition rows.

    Both the previous outcome (``zeta``) and the current outcome (``theta``)
    are regressed on ``1 + M_t + M_{t-1}``, ignoring clustering.  Rows
    outside the transition set, or without an observed previous outcome, are
    dropped.

    Parameters
    ----------
    view : `~wedgepce.trial_data.LaggedView`

    Returns
    -------
    response : `AuxiliaryFit`

    Raises
    ------
    SeparationError, RankError
    CalibrationError
        When an iteration stalls without converging.
    """

    rows, previous, current = _transition_pairs(view)
    lag_outcome = rows.column('lag_outcome').astype(float)
    keep = np.isfinite(lag_outcome)
    design = np.column_stack([np.ones(keep.sum()), current[keep], previous[keep]])

    fits = []
    for name, y in (('previous', lag_outcome[keep]), ('current', rows.column('outcome').astype(float)[keep])):
        try:
            fits.append(_irls(design, y))
        except NonConvergenceError as err:
            raise CalibrationError(f"Auxiliary fit of the {name} outcome did not converge: {err}") from err
    (zeta, zeta_iter), (theta, theta_iter) = fits
    return AuxiliaryFit(zeta=tuple(float(v) for v in zeta), theta=tuple(float(v) for v in theta),
                        n_obs=int(keep.sum()), iterations=(zeta_iter, theta_iter))


def lambda_bounds(aux: AuxiliaryFit, draws, per_draw=False) -> SensitivityBounds:
    """
    Assemble the slope bounds.

    ``lambda0`` ranges from ``zeta_1`` to the posterior mean of ``beta2``;
    ``lambda1`` from ``theta_2`` to the posterior mean of ``beta2 + beta3``.
    The bounds may come out inverted; `sample_lambda` handles that case.

    Parameters
    ----------
    aux : `AuxiliaryFit`
    draws : `~wedgepce.sampler.PosteriorDraws`
    per_draw : bool
        Also keep the upper bounds of every posterior draw.

    Returns
    -------
    response : `SensitivityBounds`
        Only the slope fields (and the auxiliary coefficients) are set.
    """

    if len(draws) == 0:
        raise ParameterError("Posterior draws are empty.")
    beta2 = draws.column('beta2')
    beta3 = draws.column('beta3')
    return SensitivityBounds(
        lambda0_lower=aux.zeta[1], lambda0_upper=float(np.mean(beta2)),
        lambda1_lower=aux.theta[2], lambda1_upper=float(np.mean(beta2 + beta3)),
        lambda0_upper_draws=beta2.copy() if per_draw else None,
        lambda1_upper_draws=(beta2 + beta3) if per_draw else None,
        zeta=aux.zeta, theta=aux.theta)


def rho_grid(rho_star):
    """
    Grid of cross-world correlations from the lower bound up to 0.9.

    The grid holds ``rho_star`` followed by the multiples of 0.1 from the
    first one at or above ``rho_star`` to 0.9.

    >>> rho_grid(0.654)
    [0.654, 0.7, 0.8, 0.9]
    """

    if not -1 < rho_star < 1:
        raise ParameterError(f"rho_star must lie in (-1, 1), got {rho_star}.")
    grid = [float(rho_star)]
    for k in range(int(np.ceil(rho_star * 10 - 1e-9)), 10):
        value = round(k / 10, 1)
        if abs(value - rho_star) > 1e-9:
            grid.append(value)
    return grid


def _triangular_lower_mode(rng, lower, upper, count):
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (count,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (count,))
    degenerate = lower >= upper
    out = 0.5 * (lower + upper)
    draws = rng.triangular(np.where(degenerate, 0.0, lower), np.where(degenerate, 0.0, lower),
                           np.where(degenerate, 1.0, upper))
    return np.where(degenerate, out, draws)


def sample_lambda(bounds: SensitivityBounds, count, seed):
    """
    Draw ``(lambda0, lambda1)`` pairs from triangular priors with the mode at the lower bound.

    An arm whose lower bound is not below its upper bound gets the point mass
    at the midpoint of its bounds.  With per-draw upper bounds of length
    ``count``, draw ``k`` uses the ``k``-th upper bound.

    Returns
    -------
    response : tuple of `~numpy.ndarray`
        ``(lambda0, lambda1)``, each of length ``count``.
    """

    if count < 1:
        raise ParameterError("count must be at least 1.")
    rng = make_rng(seed)

    out = []
    for z, per_draw in ((0, bounds.lambda0_upper_draws), (1, bounds.lambda1_upper_draws)):
        lower, upper = bounds.arm(z)
        if lower is None or upper is None:
            raise ParameterError(f"Bounds of lambda{z} are not calibrated.")
        if per_draw is not None and len(per_draw) == count:
            upper = np.asarray(per_draw, dtype=float)
        elif lower > upper:
            warnings.warn(f"lambda{z} bounds are inverted ({lower:.4g} >= {upper:.4g}); "
                          f"using the midpoint.", InputWarning)
        out.append(_triangular_lower_mode(rng, lower, upper, count))
    return out[0], out[1]


@dataclass(frozen=True, eq=False)
class SensitivityConfig:
    """
    Sensitivity settings for the PCE computation.

    Attributes
    ----------
    rho_grid : tuple of float
        Cross-world correlations to evaluate, each in (-1, 1).
    rule : {'triangular', 'fixed'}
        How ``(lambda0, lambda1)`` are drawn.
    bounds : `SensitivityBounds`
        Used by the triangular rule.
    lambda0, lambda1 : float, optional
        Values used by the fixed rule.
    """

    rho_grid: Tuple[float, ...]
    rule: str = 'triangular'
    bounds: Optional[SensitivityBounds] = None
    lambda0: Optional[float] = None
    lambda1: Optional[float] = None

    def __post_init__(self):
        grid = tuple(float(r) for r in self.rho_grid)
        if not grid or any(not -1 < r < 1 for r in grid):
            raise ParameterError(f"rho grid values must lie in (-1, 1), got {grid}.")
        object.__setattr__(self, 'rho_grid', grid)
        if self.rule not in LAMBDA_RULES:
            raise ParameterError(f"Unknown lambda rule {self.rule!r}; expected one of {LAMBDA_RULES}.")
        if self.rule == 'fixed' and (self.lambda0 is None or self.lambda1 is None):
            raise ParameterError("The fixed lambda rule needs lambda0 and lambda1.")
        if self.rule == 'triangular' and self.bounds is None:
            raise ParameterError("The triangular lambda rule needs calibrated bounds.")

    @property
    def fallback(self):
        if self.rule != 'triangular':
            return {"lambda0": None, "lambda1": None}
        return {"lambda0": self.bounds.fallback(0), "lambda1": self.bounds.fallback(1)}

    def draw_lambda(self, count, seed):
        """``(lambda0, lambda1)`` arrays of length ``count``."""

        if self.rule == 'fixed':
            return np.full(count, float(self.lambda0)), np.full(count, float(self.lambda1))
        return sample_lambda(self.bounds, count, seed)

    def to_dict(self):
        return {"rho_grid": list(self.rho_grid), "rule": self.rule, "lambda0": _optional_float(self.lambda0),
                "lambda1": _optional_float(self.lambda1), "fallback": self.fallback,
                "bounds": None if self.bounds is None else self.bounds.to_dict()}

    @classmethod
    def from_dict(cls, values):
        bounds = values.get("bounds")
        return cls(rho_grid=tuple(values["rho_grid"]), rule=values.get("rule", 'triangular'),
                   bounds=None if bounds is None else SensitivityBounds.from_dict(bounds),
                   lambda0=values.get("lambda0"), lambda1=values.get("lambda1"))


def calibrate(data: TrialDataset, draws, per_period=False, per_draw=False) -> SensitivityBounds:
    """
    Full calibration: the correlation lower bound, the auxiliary fits and the slope bounds.

    Parameters
    ----------
    data : `~wedgepce.trial_data.TrialDataset`
    draws : `~wedgepce.sampler.PosteriorDraws`
    per_period : bool
        Also estimate period-specific correlations.
    per_draw : bool
        Keep per-draw slope upper bounds.

    Returns
    -------
    response : `SensitivityBounds`
    """

    rho = estimate_rho_star(data, per_period=per_period)
    aux = fit_auxiliary_glm(observed_rows(data))
    lam = lambda_bounds(aux, draws, per_draw=per_draw)
    log.info(f"lambda0 in [{lam.lambda0_lower:.4f}, {lam.lambda0_upper:.4f}], "
             f"lambda1 in [{lam.lambda1_lower:.4f}, {lam.lambda1_upper:.4f}]")
    return replace(lam, rho_star=rho.rho_star, rho_star_by_period=rho.rho_star_by_period,
                   n_transition=rho.n_transition, n_transition_by_period=rho.n_transition_by_period)


def sensitivity_config(bounds: SensitivityBounds, rule='triangular', lambda0=None, lambda1=None,
                       rho_values=None) -> SensitivityConfig:
    """
    Build the sensitivity settings from calibrated bounds.

    Parameters
    ----------
    bounds : `SensitivityBounds`
    rule : {'triangular', 'fixed'}
    lambda0, lambda1 : float, optional
        Values for the fixed rule.
    rho_values : sequence of float, optional
        Explicit correlation grid; defaults to ``rho_grid(bounds.rho_star)``.
    """

    if rho_values is None:
        if bounds.rho_star is None:
            raise ParameterError("Bounds carry no rho_star to build the correlation grid from.")
        rho_values = rho_grid(bounds.rho_star)
    return SensitivityConfig(rho_grid=tuple(rho_values), rule=rule, bounds=bounds, lambda0=lambda0,
                             lambda1=lambda1)
