# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
The observed-data model for stepped-wedge trials with a continuous mediator
and a binary outcome.

Mediator (identity link)::

    M_ijt = eta1_t + gamma1 Z_jt + alpha1_j + phi1_ij + eps_ijt

Outcome (logit link)::

    logit P(Y_ijt = 1) = eta2_t + beta1 Z_jt + beta2 M* + beta3 Z_jt M*
                         + beta4 Z_j,t-1 M* + alpha2_j + phi2_ij

where ``M*`` is the contemporaneous mediator (``mediator_lag=0``) or the
previous-period mediator (``mediator_lag=1``).  Cluster effects
``(alpha1, alpha2)`` and individual effects ``(phi1, phi2)`` are bivariate
normal and are sampled in non-centered coordinates through their Cholesky
factors.  Period effects absorb the intercepts, so ``gamma0 = beta0 = 0``.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .exceptions import ParameterError
from .trial_data import LaggedView, TrialDataset, observed_rows

__all__ = ['ModelParams', 'LatentEffects', 'HyperPriors', 'ParameterLayout', 'ObservedDataModel',
           'cholesky_factor', 'to_unconstrained', 'from_unconstrained', 'log_joint', 'log_joint_grad']

LOG_2PI = np.log(2.0 * np.pi)
N_BETA = 4


def cholesky_factor(sigma1, sigma2, rho):
    """
    Lower Cholesky factor of ``[[s1^2, rho s1 s2], [rho s1 s2, s2^2]]``.

    Valid for any non-negative scales and ``|rho| <= 1`` (positive
    semi-definite covariance).
    """

    if sigma1 < 0 or sigma2 < 0 or not abs(rho) <= 1:
        raise ParameterError(f"Covariance is not positive semi-definite (sigmas {sigma1}, {sigma2}, rho {rho}).")
    return np.array([[sigma1, 0.0], [rho * sigma2, sigma2 * np.sqrt(1.0 - rho**2)]])


def _log_cosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Parameters of the observed-data model.

    Attributes
    ----------
    eta1 : array
        Mediator period effects for periods ``1..T``.
    eta2 : array
        Outcome period effects, one per entry of ``outcome_periods``.
    outcome_periods : tuple of int
        Periods with an outcome model.
    gamma1 : float
        Treatment effect on the mediator.
    beta : array
        ``(beta1, beta2, beta3, beta4)``.
    sigma_eps : float
        Residual sd of the mediator.
    sigma_alpha, sigma_phi : tuple of float
        Sds of the (mediator, outcome) cluster and individual effects.
    rho_alpha, rho_phi : float
        Correlations of the cluster and individual effects.
    """

    eta1: np.ndarray
    eta2: np.ndarray
    outcome_periods: Tuple[int, ...]
    gamma1: float
    beta: np.ndarray
    sigma_eps: float
    sigma_alpha: Tuple[float, float]
    rho_alpha: float
    sigma_phi: Tuple[float, float]
    rho_phi: float

    gamma0 = 0.0
    beta0 = 0.0

    def __post_init__(self):
        eta1 = np.array(self.eta1, dtype=float).ravel()
        eta2 = np.array(self.eta2, dtype=float).ravel()
        periods = tuple(int(t) for t in self.outcome_periods)
        beta = np.array(self.beta, dtype=float).ravel()
        if len(eta2) != len(periods):
            raise ParameterError(f"eta2 has {len(eta2)} values for {len(periods)} outcome periods.")
        if len(beta) != N_BETA:
            raise ParameterError(f"beta must have {N_BETA} values, got {len(beta)}.")
        if any(t < 1 or t > len(eta1) for t in periods) or len(set(periods)) != len(periods):
            raise ParameterError(f"Outcome periods {periods} must be distinct periods in 1..{len(eta1)}.")

        sigma_alpha = tuple(float(s) for s in self.sigma_alpha)
        sigma_phi = tuple(float(s) for s in self.sigma_phi)
        if len(sigma_alpha) != 2 or len(sigma_phi) != 2:
            raise ParameterError("sigma_alpha and sigma_phi must each have two components.")
        if self.sigma_eps < 0 or min(sigma_alpha + sigma_phi) < 0:
            raise ParameterError("Standard deviations must be non-negative.")
        if not (abs(self.rho_alpha) <= 1 and abs(self.rho_phi) <= 1):
            raise ParameterError("Random-effect correlations must lie in [-1, 1].")

        for name, value in (('eta1', eta1), ('eta2', eta2), ('beta', beta)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'outcome_periods', periods)
        object.__setattr__(self, 'gamma1', float(self.gamma1))
        object.__setattr__(self, 'sigma_eps', float(self.sigma_eps))
        object.__setattr__(self, 'sigma_alpha', sigma_alpha)
        object.__setattr__(self, 'rho_alpha', float(self.rho_alpha))
        object.__setattr__(self, 'sigma_phi', sigma_phi)
        object.__setattr__(self, 'rho_phi', float(self.rho_phi))

    @property
    def n_periods(self):
        return len(self.eta1)

    def eta1_at(self, period):
        if not 1 <= period <= self.n_periods:
            raise ParameterError(f"Period {period} is outside 1..{self.n_periods}.")
        return float(self.eta1[period - 1])

    def eta2_at(self, period):
        if period not in self.outcome_periods:
            raise ParameterError(f"Period {period} has no outcome model (outcome periods {self.outcome_periods}).")
        return float(self.eta2[self.outcome_periods.index(period)])

    @property
    def cov_alpha(self):
        s1, s2 = self.sigma_alpha
        return np.array([[s1**2, self.rho_alpha * s1 * s2], [self.rho_alpha * s1 * s2, s2**2]])

    @property
    def cov_phi(self):
        s1, s2 = self.sigma_phi
        return np.array([[s1**2, self.rho_phi * s1 * s2], [self.rho_phi * s1 * s2, s2**2]])

    @property
    def is_positive_definite(self):
        """True when both random-effect covariances are positive definite and sigma_eps > 0."""
        return (self.sigma_eps > 0 and min(self.sigma_alpha + self.sigma_phi) > 0
                and abs(self.rho_alpha) < 1 and abs(self.rho_phi) < 1)

    @property
    def mediator_variance(self):
        """Marginal variance of M given the period and treatment."""
        return self.cov_alpha[0, 0] + self.cov_phi[0, 0] + self.sigma_eps**2

    @property
    def mediator_outcome_covariance(self):
        """Covariance between the mediator and outcome random effects."""
        return self.cov_alpha[0, 1] + self.cov_phi[0, 1]

    @property
    def outcome_effect_variance(self):
        """Variance of the outcome random effects ``alpha2 + phi2``."""
        return self.cov_alpha[1, 1] + self.cov_phi[1, 1]

    def to_dict(self):
        return {"eta1": self.eta1.tolist(), "eta2": self.eta2.tolist(), "outcome_periods": list(self.outcome_periods),
                "gamma1": self.gamma1, "beta": self.beta.tolist(), "sigma_eps": self.sigma_eps,
                "sigma_alpha": list(self.sigma_alpha), "rho_alpha": self.rho_alpha,
                "sigma_phi": list(self.sigma_phi), "rho_phi": self.rho_phi}

    @classmethod
    def from_dict(cls, values):
        return cls(**{name: values[name] for name in ('eta1', 'eta2', 'outcome_periods', 'gamma1', 'beta',
                                                      'sigma_eps', 'sigma_alpha', 'rho_alpha', 'sigma_phi',
                                                      'rho_phi')})


@dataclass(frozen=True, eq=False)
class LatentEffects:
    """
    Random effects in non-centered coordinates.

    ``z_alpha`` has one row per cluster and ``z_phi`` one row per individual;
    the columns are the (mediator, outcome) components.  The effects are
    ``alpha = z_alpha @ L_alpha.T`` and ``phi = z_phi @ L_phi.T``.
    """

    z_alpha: np.ndarray
    z_phi: np.ndarray

    def __post_init__(self):
        z_alpha = np.array(self.z_alpha, dtype=float).reshape(-1, 2)
        z_phi = np.array(self.z_phi, dtype=float).reshape(-1, 2)
        object.__setattr__(self, 'z_alpha', z_alpha)
        object.__setattr__(self, 'z_phi', z_phi)

    @classmethod
    def zeros(cls, n_clusters, n_individuals):
        return cls(np.zeros((n_clusters, 2)), np.zeros((n_individuals, 2)))

    def effects(self, params: ModelParams):
        """Return ``(alpha, phi)`` on the natural scale."""
        l_alpha = cholesky_factor(*params.sigma_alpha, params.rho_alpha)
        l_phi = cholesky_factor(*params.sigma_phi, params.rho_phi)
        return self.z_alpha @ l_alpha.T, self.z_phi @ l_phi.T


@dataclass(frozen=True)
class HyperPriors:
    """
    Prior settings.

    Fixed effects are N(0, ``fixed_effect_variance``), every sd parameter is
    Exponential(``scale_rate``) and both correlations are Uniform(-1, 1).
    """

    fixed_effect_variance: float = 10.0
    scale_rate: float = 1.0

    def __post_init__(self):
        if not self.fixed_effect_variance > 0 or not self.scale_rate > 0:
            raise ParameterError("Prior variance and rate must be positive.")

    @property
    def fixed_effect_sd(self):
        return float(np.sqrt(self.fixed_effect_variance))


class ParameterLayout():
    """
    Positions and names of the unconstrained coordinates.

    The vector holds, in order: ``eta1[1..T]``, ``eta2[t]`` for the outcome
    periods, ``gamma1``, ``beta1..beta4``, ``log_sigma_eps``,
    ``log_sigma_alpha1``, ``log_sigma_alpha2``, ``atanh_rho_alpha``,
    ``log_sigma_phi1``, ``log_sigma_phi2``, ``atanh_rho_phi``, then (when
    latents are included) ``z_alpha`` row by row and ``z_phi`` row by row.
    """

    def __init__(self, n_periods, outcome_periods, cluster_ids=(), individual_keys=()):

        self.n_periods = int(n_periods)
        self.outcome_periods = tuple(int(t) for t in outcome_periods)
        self.cluster_ids = tuple(cluster_ids)
        self.individual_keys = tuple(tuple(k) for k in individual_keys)

        pos = 0

        def take(size):
            nonlocal pos
            sl = slice(pos, pos + size)
            pos += size
            return sl

        self.eta1 = take(self.n_periods)
        self.eta2 = take(len(self.outcome_periods))
        self.gamma1 = pos
        take(1)
        self.beta = take(N_BETA)
        self.log_sigma_eps = pos
        take(1)
        self.log_sigma_alpha = take(2)
        self.atanh_rho_alpha = pos
        take(1)
        self.log_sigma_phi = take(2)
        self.atanh_rho_phi = pos
        take(1)
        self.n_params = pos
        self.z_alpha = take(2 * len(self.cluster_ids))
        self.z_phi = take(2 * len(self.individual_keys))
        self.size = pos

    @property
    def n_clusters(self):
        return len(self.cluster_ids)

    @property
    def n_individuals(self):
        return len(self.individual_keys)

    @property
    def param_names(self):
        names = [f"eta1[{t}]" for t in range(1, self.n_periods + 1)]
        names += [f"eta2[{t}]" for t in self.outcome_periods]
        names += ["gamma1"] + [f"beta{k}" for k in range(1, N_BETA + 1)]
        names += ["log_sigma_eps", "log_sigma_alpha1", "log_sigma_alpha2", "atanh_rho_alpha",
                  "log_sigma_phi1", "log_sigma_phi2", "atanh_rho_phi"]
        return names

    @property
    def names(self):
        names = self.param_names
        for cid in self.cluster_ids:
            names += [f"z_alpha1[{cid}]", f"z_alpha2[{cid}]"]
        for cid, iid in self.individual_keys:
            names += [f"z_phi1[{cid}/{iid}]", f"z_phi2[{cid}/{iid}]"]
        return names

    def to_dict(self):
        return {"n_periods": self.n_periods, "outcome_periods": list(self.outcome_periods),
                "cluster_ids": list(self.cluster_ids), "individual_keys": [list(k) for k in self.individual_keys]}

    @classmethod
    def from_dict(cls, values):
        return cls(values["n_periods"], values["outcome_periods"], values.get("cluster_ids", ()),
                   values.get("individual_keys", ()))

    def params_vector(self, params: ModelParams):
        """Unconstrained coordinates of ``params`` (no latents)."""

        if params.n_periods != self.n_periods or params.outcome_periods != self.outcome_periods:
            raise ParameterError("Parameters do not match the layout periods.")
        if not params.is_positive_definite:
            raise ParameterError("Parameters must have positive scales and |correlations| < 1.")

        v = np.empty(self.n_params)
        v[self.eta1] = params.eta1
        v[self.eta2] = params.eta2
        v[self.gamma1] = params.gamma1
        v[self.beta] = params.beta
        v[self.log_sigma_eps] = np.log(params.sigma_eps)
        v[self.log_sigma_alpha] = np.log(params.sigma_alpha)
        v[self.atanh_rho_alpha] = np.arctanh(params.rho_alpha)
        v[self.log_sigma_phi] = np.log(params.sigma_phi)
        v[self.atanh_rho_phi] = np.arctanh(params.rho_phi)
        return v

    def vector(self, params: ModelParams, latents: Optional[LatentEffects] = None):
        """Full unconstrained vector (latents default to zeros)."""

        latents = latents or LatentEffects.zeros(self.n_clusters, self.n_individuals)
        if latents.z_alpha.shape[0] != self.n_clusters or latents.z_phi.shape[0] != self.n_individuals:
            raise ParameterError("Latent dimensions do not match the cluster/individual index sets.")
        return np.concatenate([self.params_vector(params), latents.z_alpha.ravel(), latents.z_phi.ravel()])

    def params(self, v) -> ModelParams:
        """Constrained parameters from an unconstrained vector (latents ignored)."""

        v = np.asarray(v, dtype=float)
        return ModelParams(eta1=v[self.eta1], eta2=v[self.eta2], outcome_periods=self.outcome_periods,
                           gamma1=v[self.gamma1], beta=v[self.beta],
                           sigma_eps=np.exp(v[self.log_sigma_eps]),
                           sigma_alpha=tuple(np.exp(v[self.log_sigma_alpha])),
                           rho_alpha=np.tanh(v[self.atanh_rho_alpha]),
                           sigma_phi=tuple(np.exp(v[self.log_sigma_phi])),
                           rho_phi=np.tanh(v[self.atanh_rho_phi]))

    def latents(self, v) -> LatentEffects:
        v = np.asarray(v, dtype=float)
        return LatentEffects(v[self.z_alpha].reshape(-1, 2), v[self.z_phi].reshape(-1, 2))

    def log_jacobian(self, v):
        """Log-Jacobian of the map from unconstrained to constrained parameters."""

        v = np.asarray(v, dtype=float)
        logs = v[self.log_sigma_eps] + v[self.log_sigma_alpha].sum() + v[self.log_sigma_phi].sum()
        # log(1 - tanh(w)^2) = -2 log cosh(w)
        return float(logs - 2.0 * _log_cosh(v[self.atanh_rho_alpha]) - 2.0 * _log_cosh(v[self.atanh_rho_phi]))


def to_unconstrained(params: ModelParams):
    """
    Unconstrained coordinates of ``params``: log for scales, atanh for
    correlations, identity for the fixed effects.
    """
    return ParameterLayout(params.n_periods, params.outcome_periods).params_vector(params)


def from_unconstrained(v, n_periods, outcome_periods):
    """Inverse of `to_unconstrained`."""
    return ParameterLayout(n_periods, outcome_periods).params(v)


class ObservedDataModel():
    """
    Log posterior of the observed-data model over a lagged view.

    Parameters
    ----------
    view : `~wedgepce.trial_data.LaggedView`
        Observed rows (``observed_rows(data, require_lag=False)``).  Every
        row contributes a mediator term; rows in the outcome periods (with an
        observed lagged mediator when ``mediator_lag=1``) contribute an
        outcome term.
    n_periods : int
        Number of trial periods T.
    cluster_ids, individual_keys : sequence
        Index sets of the latent effects.  Default to those present in ``view``.
    hyperpriors : `HyperPriors`, optional
    outcome_periods : sequence of int, optional
        Defaults to ``2..T``.
    mediator_lag : {0, 1}
        Which mediator enters the outcome model.
    """

    def __init__(self, view: LaggedView, n_periods, cluster_ids=None, individual_keys=None,
                 hyperpriors: Optional[HyperPriors] = None, outcome_periods: Optional[Sequence[int]] = None,
                 mediator_lag=0):

        if mediator_lag not in (0, 1):
            raise ParameterError(f"mediator_lag must be 0 or 1, got {mediator_lag}.")
        if outcome_periods is None or len(outcome_periods) == 0:
            outcome_periods = range(2, n_periods + 1)
        outcome_periods = tuple(sorted(int(t) for t in outcome_periods))
        if mediator_lag == 1 and min(outcome_periods) < 2:
            raise ParameterError("A lagged mediator requires outcome periods >= 2.")

        cluster = view.column('cluster_id').astype(str)
        individual = view.column('individual_id').astype(str)
        if cluster_ids is None:
            cluster_ids = tuple(np.unique(cluster))
        if individual_keys is None:
            individual_keys = tuple(sorted(set(zip(cluster, individual))))

        self.hyperpriors = hyperpriors or HyperPriors()
        self.mediator_lag = mediator_lag
        self.layout = ParameterLayout(n_periods, outcome_periods, cluster_ids, individual_keys)
        self.view = view

        cluster_index = {cid: j for j, cid in enumerate(self.layout.cluster_ids)}
        individual_index = {key: i for i, key in enumerate(self.layout.individual_keys)}
        try:
            row_cluster = np.array([cluster_index[c] for c in cluster], dtype=int)
            row_individual = np.array([individual_index[k] for k in zip(cluster, individual)], dtype=int)
        except KeyError as err:
            raise IndexError(f"Row references an unknown cluster or individual: {err.args[0]}")

        period = view.column('period').astype(int)
        if np.any((period < 1) | (period > n_periods)):
            raise IndexError("Row period outside 1..T.")
        treatment = view.column('treatment').astype(float)
        mediator = view.column('mediator').astype(float)

        # mediator rows
        self._m = mediator
        self._m_period = period - 1
        self._m_treat = treatment
        self._m_cluster = row_cluster
        self._m_individual = row_individual

        # outcome rows
        regressor = mediator if mediator_lag == 0 else view.column('lag_mediator').astype(float)
        keep = np.isin(period, outcome_periods) & np.isfinite(regressor)
        period_slot = {t: k for k, t in enumerate(outcome_periods)}
        self._y = view.column('outcome').astype(float)[keep]
        self._y_period = np.array([period_slot[t] for t in period[keep]], dtype=int)
        self._y_treat = treatment[keep]
        self._y_mstar = regressor[keep]
        self._y_lag_treat = np.clip(view.column('lag_treatment').astype(float)[keep], 0, 1)
        self._y_cluster = row_cluster[keep]
        self._y_individual = row_individual[keep]

    @classmethod
    def from_dataset(cls, data: TrialDataset, hyperpriors=None, outcome_periods=None, mediator_lag=0):
        """Model over every observed row of ``data`` with its full index sets."""
        return cls(observed_rows(data), data.n_periods, data.cluster_ids, data.individual_keys,
                   hyperpriors=hyperpriors, outcome_periods=outcome_periods, mediator_lag=mediator_lag)

    @property
    def dim(self):
        return self.layout.size

    @property
    def n_mediator_rows(self):
        return len(self._m)

    @property
    def n_outcome_rows(self):
        return len(self._y)

    def _linear_predictors(self, eta1, eta2, gamma1, beta, alpha, phi):
        mean_m = (eta1[self._m_period] + gamma1 * self._m_treat
                  + alpha[self._m_cluster, 0] + phi[self._m_individual, 0])
        mstar = self._y_mstar
        lin_y = (eta2[self._y_period] + beta[0] * self._y_treat + beta[1] * mstar
                 + beta[2] * self._y_treat * mstar + beta[3] * self._y_lag_treat * mstar
                 + alpha[self._y_cluster, 1] + phi[self._y_individual, 1])
        return self._m - mean_m, lin_y

    def terms(self, params: ModelParams, latents: LatentEffects):
        """
        The components of the log joint density in constrained coordinates.

        Returns
        -------
        response : dict
            ``mediator``, ``outcome`` (log likelihoods), ``latent`` (standard
            normal density of the non-centered effects) and ``prior``.
        """

        if (latents.z_alpha.shape[0] != self.layout.n_clusters
                or latents.z_phi.shape[0] != self.layout.n_individuals):
            raise IndexError("Latent dimensions do not match the cluster/individual index sets.")

        alpha, phi = latents.effects(params)
        resid, lin_y = self._linear_predictors(params.eta1, params.eta2, params.gamma1, params.beta, alpha, phi)

        sigma = params.sigma_eps
        mediator = float(np.sum(-0.5 * LOG_2PI - np.log(sigma) - 0.5 * (resid / sigma)**2))
        outcome = float(np.sum(self._y * lin_y - np.logaddexp(0.0, lin_y)))
        latent = float(-0.5 * np.sum(latents.z_alpha**2) - 0.5 * np.sum(latents.z_phi**2)
                       - 0.5 * LOG_2PI * (latents.z_alpha.size + latents.z_phi.size))

        hp = self.hyperpriors
        fixed = np.concatenate([params.eta1, params.eta2, [params.gamma1], params.beta])
        scales = np.array((params.sigma_eps,) + params.sigma_alpha + params.sigma_phi)
        prior = float(-0.5 * np.sum(fixed**2) / hp.fixed_effect_variance
                      - 0.5 * fixed.size * np.log(2.0 * np.pi * hp.fixed_effect_variance)
                      + scales.size * np.log(hp.scale_rate) - hp.scale_rate * np.sum(scales)
                      - 2.0 * np.log(2.0))

        return {"mediator": mediator, "outcome": outcome, "latent": latent, "prior": prior}

    def log_joint(self, params: ModelParams, latents: LatentEffects):
        """Log joint density (likelihood, latent density and priors) in constrained coordinates."""
        return sum(self.terms(params, latents).values())

    def log_density(self, v):
        """Log posterior density in unconstrained coordinates (includes the log-Jacobian)."""
        return self.log_density_and_grad(v)[0]

    def log_density_and_grad(self, v):
        """
        Log posterior density and its analytic gradient in unconstrained coordinates.

        Parameters
        ----------
        v : array
            Unconstrained vector, laid out per `ParameterLayout` (latents included).

        Returns
        -------
        response : tuple
            ``(value, gradient)``.
        """

        lay = self.layout
        v = np.asarray(v, dtype=float)
        if v.shape != (lay.size,):
            raise IndexError(f"Expected a vector of length {lay.size}, got shape {v.shape}.")
        hp = self.hyperpriors

        eta1, eta2, gamma1, beta = v[lay.eta1], v[lay.eta2], v[lay.gamma1], v[lay.beta]
        u_eps = v[lay.log_sigma_eps]
        u_alpha, w_alpha = v[lay.log_sigma_alpha], v[lay.atanh_rho_alpha]
        u_phi, w_phi = v[lay.log_sigma_phi], v[lay.atanh_rho_phi]
        z_alpha = v[lay.z_alpha].reshape(-1, 2)
        z_phi = v[lay.z_phi].reshape(-1, 2)

        with np.errstate(over='ignore', invalid='ignore'):
            sigma_eps = np.exp(u_eps)
            s_alpha, s_phi = np.exp(u_alpha), np.exp(u_phi)
            r_alpha, r_phi = np.tanh(w_alpha), np.tanh(w_phi)
            c_alpha, c_phi = 1.0 / np.cosh(w_alpha), 1.0 / np.cosh(w_phi)

            alpha = np.column_stack([s_alpha[0] * z_alpha[:, 0],
                                     s_alpha[1] * (r_alpha * z_alpha[:, 0] + c_alpha * z_alpha[:, 1])])
            phi = np.column_stack([s_phi[0] * z_phi[:, 0],
                                   s_phi[1] * (r_phi * z_phi[:, 0] + c_phi * z_phi[:, 1])])

            resid, lin_y = self._linear_predictors(eta1, eta2, gamma1, beta, alpha, phi)

            inv_var = np.exp(-2.0 * u_eps)
            ss = np.sum(resid**2)
            n_m = len(resid)
            value = -0.5 * n_m * LOG_2PI - n_m * u_eps - 0.5 * inv_var * ss
            value += np.sum(self._y * lin_y - np.logaddexp(0.0, lin_y))
            value += -0.5 * (np.sum(z_alpha**2) + np.sum(z_phi**2)) - 0.5 * LOG_2PI * (z_alpha.size + z_phi.size)

            fixed = v[:lay.log_sigma_eps]
            scales = np.concatenate([[sigma_eps], s_alpha, s_phi])
            value += (-0.5 * np.sum(fixed**2) / hp.fixed_effect_variance
                      - 0.5 * fixed.size * np.log(2.0 * np.pi * hp.fixed_effect_variance)
                      + scales.size * np.log(hp.scale_rate) - hp.scale_rate * np.sum(scales)
                      - 2.0 * np.log(2.0))
            value += lay.log_jacobian(v)

            score_m = resid * inv_var
            score_y = self._y - special.expit(lin_y)

            grad = np.zeros(lay.size)
            grad[lay.eta1] = np.bincount(self._m_period, score_m, minlength=lay.n_periods)
            grad[lay.eta2] = np.bincount(self._y_period, score_y, minlength=len(lay.outcome_periods))
            grad[lay.gamma1] = np.dot(self._m_treat, score_m)
            mstar = self._y_mstar
            grad[lay.beta] = [np.dot(self._y_treat, score_y), np.dot(mstar, score_y),
                              np.dot(self._y_treat * mstar, score_y), np.dot(self._y_lag_treat * mstar, score_y)]
            grad[:lay.log_sigma_eps] -= fixed / hp.fixed_effect_variance

            grad[lay.log_sigma_eps] = -n_m + inv_var * ss - hp.scale_rate * sigma_eps + 1.0

            n_clusters, n_individuals = lay.n_clusters, lay.n_individuals
            g_alpha1 = np.bincount(self._m_cluster, score_m, minlength=n_clusters)
            g_alpha2 = np.bincount(self._y_cluster, score_y, minlength=n_clusters)
            g_phi1 = np.bincount(self._m_individual, score_m, minlength=n_individuals)
            g_phi2 = np.bincount(self._y_individual, score_y, minlength=n_individuals)

            grad[lay.log_sigma_alpha] = [np.dot(g_alpha1, alpha[:, 0]), np.dot(g_alpha2, alpha[:, 1])]
            grad[lay.log_sigma_alpha] += 1.0 - hp.scale_rate * s_alpha
            grad[lay.atanh_rho_alpha] = (s_alpha[1] * np.dot(g_alpha2, c_alpha**2 * z_alpha[:, 0]
                                                             - r_alpha * c_alpha * z_alpha[:, 1])
                                         - 2.0 * r_alpha)
            grad[lay.log_sigma_phi] = [np.dot(g_phi1, phi[:, 0]), np.dot(g_phi2, phi[:, 1])]
            grad[lay.log_sigma_phi] += 1.0 - hp.scale_rate * s_phi
            grad[lay.atanh_rho_phi] = (s_phi[1] * np.dot(g_phi2, c_phi**2 * z_phi[:, 0]
                                                         - r_phi * c_phi * z_phi[:, 1])
                                       - 2.0 * r_phi)

            d_alpha = np.column_stack([s_alpha[0] * g_alpha1 + s_alpha[1] * r_alpha * g_alpha2,
                                       s_alpha[1] * c_alpha * g_alpha2]) - z_alpha
            d_phi = np.column_stack([s_phi[0] * g_phi1 + s_phi[1] * r_phi * g_phi2,
                                     s_phi[1] * c_phi * g_phi2]) - z_phi
            grad[lay.z_alpha] = d_alpha.ravel()
            grad[lay.z_phi] = d_phi.ravel()

        return float(value), grad

    def __call__(self, v):
        return self.log_density_and_grad(v)


def log_joint(params: ModelParams, latents: LatentEffects, data: LaggedView, hyperpriors=None, **kwargs):
    """
    Log joint density of the observed-data model in constrained coordinates.

    Parameters
    ----------
    params : `ModelParams`
    latents : `LatentEffects`
    data : `~wedgepce.trial_data.LaggedView`
        Observed rows.
    hyperpriors : `HyperPriors`, optional
    **kwargs
        ``cluster_ids``, ``individual_keys``, ``mediator_lag`` passed to `ObservedDataModel`.
    """

    model = ObservedDataModel(data, params.n_periods, hyperpriors=hyperpriors,
                              outcome_periods=params.outcome_periods, **kwargs)
    return model.log_joint(params, latents)


def log_joint_grad(v, data: LaggedView, n_periods, hyperpriors=None, outcome_periods=None, **kwargs):
    """
    Log posterior and analytic gradient at an unconstrained vector (latents included).
    """

    model = ObservedDataModel(data, n_periods, hyperpriors=hyperpriors, outcome_periods=outcome_periods, **kwargs)
    return model.log_density_and_grad(v)
