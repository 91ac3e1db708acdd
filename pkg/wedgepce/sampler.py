# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Posterior sampling by Hamiltonian Monte Carlo and convergence diagnostics.

The sampler integrates Hamilton's equations with the leapfrog scheme, using a
step count drawn uniformly from ``1..max_leapfrog`` at every iteration.
During warmup the step size is tuned by dual averaging towards the target
acceptance rate and a diagonal mass matrix is estimated from the middle
warmup window.  Chains run independently, each with its own random stream.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from time import time
from typing import Callable, Optional, Sequence

import numpy as np
from astropy import log
from astropy.table import Table
from scipy import fft, stats

from .exceptions import (ArtifactError, InitializationError, ParameterError, SamplerQualityError,
                         SamplerWarning, TrialDataError)
from .model import HyperPriors, ModelParams, ObservedDataModel, ParameterLayout
from .trial_data import TrialDataset
from .utils.numerics import spawn_rngs
from .utils.utils import Threads, parse_threads, read_json, run_threaded, write_json

__all__ = ['SamplerConfig', 'DualAveraging', 'PosteriorDraws', 'Diagnostics', 'run_hmc', 'diagnostics',
           'check_divergences', 'rhat_rank', 'ess_bulk', 'fit']

INIT_SD = 0.1
INIT_ATTEMPTS = 100
DIVERGENCE_THRESHOLD = 1000.0
MASS_REGULARIZATION = 1e-3
RHAT_WARNING = 1.05
ESS_WARNING = 100


@dataclass(frozen=True)
class SamplerConfig:
    """
    Settings for `run_hmc`.

    Attributes
    ----------
    chains : int
        Number of independent chains.
    warmup : int
        Adaptation iterations per chain (discarded).
    samples : int
        Retained iterations per chain.
    target_accept : float
        Target mean acceptance probability for step-size adaptation.
    max_leapfrog : int
        Upper bound L of the jittered leapfrog step count (uniform over 1..L).
    seed : int, optional
        Root seed; chain ``k`` uses the ``k``-th spawned stream.
    keep_latents : bool
        Whether `fit` keeps the latent coordinates in the draws.
    max_divergence_rate : float
        Divergence rate above which a `~wedgepce.exceptions.SamplerWarning` is issued.
    threads : int, "auto"
        Threads for running chains concurrently.
    """

    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 64
    seed: Optional[int] = None
    keep_latents: bool = False
    max_divergence_rate: float = 0.2
    threads: Threads = 1

    def __post_init__(self):
        if self.chains < 1 or self.samples < 1 or self.warmup < 0 or self.max_leapfrog < 1:
            raise ParameterError("chains, samples and max_leapfrog must be positive, warmup non-negative.")
        if not 0 < self.target_accept < 1:
            raise ParameterError(f"target_accept must lie in (0, 1), got {self.target_accept}.")
        if not 0 <= self.max_divergence_rate <= 1:
            raise ParameterError("max_divergence_rate must lie in [0, 1].")
        object.__setattr__(self, 'threads', parse_threads(self.threads))

    def to_dict(self):
        return {"chains": self.chains, "warmup": self.warmup, "samples": self.samples,
                "target_accept": self.target_accept, "max_leapfrog": self.max_leapfrog, "seed": self.seed,
                "keep_latents": self.keep_latents, "max_divergence_rate": self.max_divergence_rate}


class DualAveraging():
    """
    Nesterov dual averaging of the log step size.

    Parameters
    ----------
    step_size : float
        Initial step size; the shrinkage point is ``log(10 * step_size)``.
    target : float
        Target acceptance probability.
    """

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):

        self.mu = np.log(10.0 * step_size)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa

        self.iteration = 0
        self.h_bar = 0.0
        self.log_step = np.log(step_size)
        self.log_step_bar = 0.0

    @property
    def step_size(self):
        return float(np.exp(self.log_step))

    @property
    def final_step_size(self):
        """The averaged step size to use once adaptation ends."""
        return float(np.exp(self.log_step_bar))

    def update(self, accept_prob):

        self.iteration += 1
        m = self.iteration
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        weight = m**(-self.kappa)
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return self.step_size


def _leapfrog(target, x, p, grad, step_size, n_steps, inv_mass):

    x, p = x.copy(), p.copy()
    logp = -np.inf
    for _ in range(n_steps):
        p += 0.5 * step_size * grad
        x += step_size * inv_mass * p
        logp, grad = target(x)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return x, p, -np.inf, grad
        p += 0.5 * step_size * grad
    return x, p, logp, grad


def _hamiltonian(logp, p, inv_mass):
    return -logp + 0.5 * np.sum(inv_mass * p**2)


def _find_reasonable_step_size(target, x, logp, grad, inv_mass, rng):
    """
    Double or halve a unit step until the one-step acceptance probability
    crosses 1/2.
    """

    step = 1.0
    p = rng.standard_normal(len(x)) / np.sqrt(inv_mass)
    h0 = _hamiltonian(logp, p, inv_mass)

    def log_ratio(step):
        _, p_new, logp_new, _ = _leapfrog(target, x, p, grad, step, 1, inv_mass)
        with np.errstate(invalid='ignore', over='ignore'):
            value = h0 - _hamiltonian(logp_new, p_new, inv_mass)
        return value if np.isfinite(value) else -np.inf

    direction = 1.0 if log_ratio(step) > np.log(0.5) else -1.0
    for _ in range(100):
        ratio = log_ratio(step)
        if direction * ratio <= direction * np.log(0.5):
            break
        step *= 2.0**direction
    return step


def _initialize(target, dim, rng, initial=None):

    if initial is not None:
        x = np.array(initial, dtype=float)
        logp, grad = target(x)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return x, logp, grad
        raise InitializationError("The supplied initial point has a non-finite log density or gradient.")

    for _ in range(INIT_ATTEMPTS):
        x = INIT_SD * rng.standard_normal(dim)
        logp, grad = target(x)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return x, logp, grad
    raise InitializationError(f"No finite starting point found in {INIT_ATTEMPTS} attempts.")


def _run_chain(target, dim, cfg: SamplerConfig, rng, chain, initial=None):

    x, logp, grad = _initialize(target, dim, rng, initial)
    inv_mass = np.ones(dim)
    step_size = _find_reasonable_step_size(target, x, logp, grad, inv_mass, rng)
    adapter = DualAveraging(step_size, cfg.target_accept)

    init_buffer = int(0.15 * cfg.warmup)
    term_buffer = int(0.1 * cfg.warmup)
    window_end = cfg.warmup - term_buffer
    window = []

    draws = np.empty((cfg.samples, dim))
    accept_stat = np.empty(cfg.samples)
    divergent = np.zeros(cfg.samples, dtype=bool)
    n_leapfrog = np.empty(cfg.samples, dtype=int)

    for iteration in range(cfg.warmup + cfg.samples):
        p = rng.standard_normal(dim) / np.sqrt(inv_mass)
        n_steps = int(rng.integers(1, cfg.max_leapfrog + 1))
        with np.errstate(invalid='ignore', over='ignore'):
            h0 = _hamiltonian(logp, p, inv_mass)
            x_new, p_new, logp_new, grad_new = _leapfrog(target, x, p, grad, step_size, n_steps, inv_mass)
            energy_error = _hamiltonian(logp_new, p_new, inv_mass) - h0

        is_divergent = not np.isfinite(energy_error) or energy_error > DIVERGENCE_THRESHOLD
        accept_prob = 0.0 if not np.isfinite(energy_error) else float(min(1.0, np.exp(-energy_error)))
        if rng.random() < accept_prob:
            x, logp, grad = x_new, logp_new, grad_new

        if iteration < cfg.warmup:
            step_size = adapter.update(accept_prob)
            if init_buffer <= iteration < window_end:
                window.append(x.copy())
            if iteration == window_end - 1 and window_end < cfg.warmup and len(window) > 1:
                n = len(window)
                variance = np.var(np.asarray(window), axis=0, ddof=1)
                inv_mass = (n / (n + 5.0)) * variance + MASS_REGULARIZATION * (5.0 / (n + 5.0))
                step_size = _find_reasonable_step_size(target, x, logp, grad, inv_mass, rng)
                adapter = DualAveraging(step_size, cfg.target_accept)
            if iteration == cfg.warmup - 1:
                step_size = adapter.final_step_size
            continue

        k = iteration - cfg.warmup
        draws[k] = x
        accept_stat[k] = accept_prob
        divergent[k] = is_divergent
        n_leapfrog[k] = n_steps

    log.debug(f"Chain {chain}: step size {step_size:.4g}, mean acceptance {accept_stat.mean():.3f}, "
              f"{int(divergent.sum())} divergences")
    return {"draws": draws, "accept_stat": accept_stat, "divergent": divergent, "n_leapfrog": n_leapfrog,
            "step_size": step_size, "inv_mass": inv_mass}


class PosteriorDraws():
    """
    Retained posterior draws in unconstrained coordinates.

    Parameters
    ----------
    values : array
        ``(n_draws, n_coordinates)`` matrix, chains stacked in order.
    names : sequence of str
        Coordinate names.
    chain : array of int
        Chain label of each draw.
    layout : `~wedgepce.model.ParameterLayout`, optional
        Needed for the constrained view `params`.
    accept_stat, divergent : array, optional
        Per-draw acceptance probability and divergence flag.
    step_size : sequence of float, optional
        Final step size of each chain.
    metadata : dict, optional
        Provenance written into the manifest (seed, configuration, data hash).
    """

    def __init__(self, values, names, chain, layout: Optional[ParameterLayout] = None, accept_stat=None,
                 divergent=None, step_size=(), metadata=None):

        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        self.names = list(names)
        self.chain = np.asarray(chain, dtype=int)
        if self.values.shape[1] != len(self.names) or len(self.chain) != len(self.values):
            raise ParameterError("Draw matrix, names and chain labels disagree in shape.")
        n = len(self.values)
        self.layout = layout
        self.accept_stat = np.full(n, np.nan) if accept_stat is None else np.asarray(accept_stat, dtype=float)
        self.divergent = np.zeros(n, dtype=bool) if divergent is None else np.asarray(divergent, dtype=bool)
        self.step_size = [float(s) for s in step_size]
        self.metadata = dict(metadata or {})

    @classmethod
    def from_params(cls, params: Sequence[ModelParams], metadata=None):
        """Draws holding the given parameter sets (one chain)."""

        params = list(params)
        if not params:
            raise ParameterError("At least one parameter set is required.")
        layout = ParameterLayout(params[0].n_periods, params[0].outcome_periods)
        values = np.array([layout.params_vector(p) for p in params])
        return cls(values, layout.param_names, np.zeros(len(params), dtype=int), layout=layout, metadata=metadata)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"<PosteriorDraws: {len(self)} draws, {self.n_chains} chains, {len(self.names)} coordinates>"

    @property
    def n_draws(self):
        return len(self.values)

    @property
    def n_chains(self):
        return len(np.unique(self.chain))

    @property
    def divergences(self):
        return int(self.divergent.sum())

    @property
    def divergence_rate(self):
        return self.divergences / max(len(self), 1)

    def column(self, name):
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"No coordinate named {name!r}.")

    def by_chain(self, name):
        """``(chains, draws per chain)`` array of one coordinate (chains truncated to equal length)."""

        values = self.column(name)
        groups = [values[self.chain == c] for c in np.unique(self.chain)]
        length = min(len(g) for g in groups)
        return np.array([g[:length] for g in groups])

    def params(self, index) -> ModelParams:
        """Constrained view of draw ``index``."""

        if self.layout is None:
            raise ParameterError("These draws carry no parameter layout.")
        return self.layout.params(self.values[index, :self.layout.n_params])

    def iter_params(self):
        for index in range(len(self)):
            yield self.params(index)

    def subset(self, indices):
        """A new `PosteriorDraws` restricted to the given draw indices."""

        indices = np.atleast_1d(np.asarray(indices))
        return PosteriorDraws(self.values[indices], self.names, self.chain[indices], layout=self.layout,
                              accept_stat=self.accept_stat[indices], divergent=self.divergent[indices],
                              step_size=self.step_size, metadata=self.metadata)

    def to_table(self):
        table = Table()
        table['draw'] = np.arange(len(self))
        table['chain'] = self.chain
        for k, name in enumerate(self.names):
            table[name] = self.values[:, k]
        return table

    def manifest(self):
        manifest = dict(self.metadata)
        manifest.update({
            "names": self.names,
            "n_draws": self.n_draws,
            "n_chains": self.n_chains,
            "step_size": self.step_size,
            "accept_stat": self.accept_stat.tolist(),
            "divergent": self.divergent.astype(int).tolist(),
            "divergences": self.divergences,
            "layout": self.layout.to_dict() if self.layout is not None else None,
        })
        return manifest

    def write(self, path):
        """
        Write the draws CSV to ``path`` and its JSON manifest next to it.

        Returns
        -------
        response : tuple of str
            ``(csv_path, manifest_path)``.
        """

        path = Path(path)
        table = self.to_table()
        formats = {name: '%.17g' for name in self.names}
        table.write(path, format='ascii.csv', formats=formats, overwrite=True)
        manifest_path = write_json(self.manifest(), path.with_suffix('.json'))
        return str(path), manifest_path

    @classmethod
    def read(cls, path):
        """Read draws written by `write`."""

        path = Path(path)
        if not path.is_file():
            raise ArtifactError(f"Missing draws file: {path}")
        manifest = read_json(path.with_suffix('.json'), artifact="draws manifest")

        table = Table.read(path, format='ascii.csv')
        names = [name for name in table.colnames if name not in ('draw', 'chain')]
        if names != manifest["names"]:
            raise ArtifactError(f"Draws file {path} does not match its manifest.")

        values = np.column_stack([np.asarray(table[name], dtype=float) for name in names]) if len(table) else \
            np.empty((0, len(names)))
        layout = ParameterLayout.from_dict(manifest["layout"]) if manifest.get("layout") else None
        metadata = {k: v for k, v in manifest.items()
                    if k not in ("names", "n_draws", "n_chains", "step_size", "accept_stat", "divergent",
                                 "divergences", "layout")}
        return cls(values, names, np.asarray(table['chain'], dtype=int), layout=layout,
                   accept_stat=manifest["accept_stat"], divergent=manifest["divergent"],
                   step_size=manifest["step_size"], metadata=metadata)


def run_hmc(logpost_grad: Callable, dim, cfg: SamplerConfig, names=None, initial=None, verbose=False):
    """
    Sample a differentiable log density by Hamiltonian Monte Carlo.

    Parameters
    ----------
    logpost_grad : callable
        Maps a point of length ``dim`` to ``(log density, gradient)``.
    dim : int
        Dimension of the target.
    cfg : `SamplerConfig`
        Must carry a seed.
    names : sequence of str, optional
        Coordinate names, default ``x0, x1, ...``.
    initial : array, optional
        Starting point for every chain instead of the random initialization.
    verbose : bool
        If True, log progress and timing.

    Returns
    -------
    response : `PosteriorDraws`
        Post-warmup draws only.
    """

    if verbose:
        start_time = time()

    if cfg.seed is None:
        raise ParameterError("SamplerConfig.seed is required for sampling.")
    names = list(names) if names is not None else [f"x{k}" for k in range(dim)]
    if len(names) != dim:
        raise ParameterError(f"{len(names)} names given for a {dim}-dimensional target.")

    rngs = spawn_rngs(cfg.seed, cfg.chains)
    if verbose:
        log.info(f"Running {cfg.chains} chain(s): {cfg.warmup} warmup + {cfg.samples} draws, dimension {dim}")

    results = run_threaded(lambda job: _run_chain(logpost_grad, dim, cfg, job[1], job[0], initial),
                           list(enumerate(rngs)), cfg.threads)

    draws = PosteriorDraws(
        values=np.vstack([r["draws"] for r in results]),
        names=names,
        chain=np.repeat(np.arange(cfg.chains), cfg.samples),
        accept_stat=np.concatenate([r["accept_stat"] for r in results]),
        divergent=np.concatenate([r["divergent"] for r in results]),
        step_size=[r["step_size"] for r in results],
        metadata={"seed": cfg.seed, "sampler": cfg.to_dict()})

    if draws.divergence_rate > cfg.max_divergence_rate:
        warnings.warn(f"{draws.divergences} of {len(draws)} draws diverged "
                      f"(rate {draws.divergence_rate:.1%}).", SamplerWarning)
    if verbose:
        log.info(f"Sampling time: {time() - start_time:.2} sec")
    return draws


def check_divergences(draws: PosteriorDraws, max_rate=0.2):
    """Raise `~wedgepce.exceptions.SamplerQualityError` if the divergence rate exceeds ``max_rate``."""

    if draws.divergence_rate > max_rate:
        raise SamplerQualityError(f"Divergence rate {draws.divergence_rate:.1%} exceeds {max_rate:.0%} "
                                  f"({draws.divergences} of {len(draws)} draws).")


def _z_scale(ary):
    """Rank-normalize all values of ``ary`` to standard normal scores."""
    rank = stats.rankdata(ary, method="average").reshape(ary.shape)
    return stats.norm.ppf((rank - 0.5) / ary.size)


def _split_chains(ary):
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def _rhat(ary):
    n = ary.shape[1]
    with np.errstate(invalid='ignore', divide='ignore'):
        between = n * np.var(ary.mean(axis=1), ddof=1)
        within = np.mean(np.var(ary, axis=1, ddof=1))
        var_plus = (n - 1.0) / n * within + between / n
        return float(np.sqrt(var_plus / within))


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(x, size)
    return fft.irfft(spectrum * np.conjugate(spectrum), size)[:n] / n


def _ess(ary):
    """Effective sample size of a ``(chains, draws)`` array (Geyer initial monotone sequence)."""

    n_chain, n_draw = ary.shape
    if n_draw < 4:
        return np.nan
    acov = np.asarray([_autocov(ary[chain]) for chain in range(n_chain)])
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(ary.mean(axis=1), ddof=1)
    if not var_plus > 0:
        return np.nan

    rho_hat = np.zeros(n_draw)
    rho_even = 1.0
    rho_hat[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho_hat[1] = rho_odd

    # initial positive sequence
    t = 1
    while t < n_draw - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        rho_hat[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho_hat[t + 2] = rho_odd
        t += 2
    max_t = t

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t]:
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0
            rho_hat[t + 2] = rho_hat[t + 1]
        t += 2

    tau = -1.0 + 2.0 * np.sum(rho_hat[:max_t]) + np.sum(rho_hat[max_t + 1:max_t + 2])
    ess = n_chain * n_draw / tau
    if not np.isfinite(ess):
        return np.nan
    return float(min(ess, n_chain * n_draw))


def rhat_rank(ary):
    """Rank-normalized split R-hat: the larger of the bulk and the folded version."""

    ary = np.asarray(ary, dtype=float)
    bulk = _rhat(_z_scale(_split_chains(ary)))
    folded = _rhat(_z_scale(_split_chains(np.abs(ary - np.median(ary)))))
    return max(bulk, folded) if np.isfinite(bulk) and np.isfinite(folded) else np.nan


def ess_bulk(ary):
    """Rank-normalized split bulk effective sample size."""

    ary = np.asarray(ary, dtype=float)
    if np.ptp(ary) == 0:
        return np.nan
    return _ess(_z_scale(_split_chains(ary)))


@dataclass
class Diagnostics:
    """
    Convergence summary per coordinate.

    ``rhat`` is None when the draws come from a single chain.  Coordinates
    whose ESS cannot be computed (constant draws) are listed in
    ``degenerate`` and carry NaN.
    """

    names: list
    rhat: Optional[np.ndarray]
    ess_bulk: np.ndarray
    divergences: int
    n_draws: int
    n_chains: int
    degenerate: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def divergence_rate(self):
        return self.divergences / max(self.n_draws, 1)

    @property
    def max_rhat(self):
        if self.rhat is None or np.all(np.isnan(self.rhat)):
            return None
        return float(np.nanmax(self.rhat))

    @property
    def min_ess(self):
        if np.all(np.isnan(self.ess_bulk)):
            return None
        return float(np.nanmin(self.ess_bulk))

    def to_table(self):
        table = Table()
        table['name'] = list(self.names)
        table['rhat'] = np.full(len(self.names), np.nan) if self.rhat is None else self.rhat
        table['ess_bulk'] = self.ess_bulk
        table['rhat'].format = '.3f'
        table['ess_bulk'].format = '.1f'
        return table

    def to_dict(self):
        return {"max_rhat": self.max_rhat, "min_ess_bulk": self.min_ess, "divergences": self.divergences,
                "divergence_rate": self.divergence_rate, "n_draws": self.n_draws, "n_chains": self.n_chains,
                "degenerate": list(self.degenerate), "warnings": list(self.warnings)}


def diagnostics(draws: PosteriorDraws, names=None, max_divergence_rate=0.2) -> Diagnostics:
    """
    Rank-normalized split R-hat and bulk ESS per coordinate.

    Parameters
    ----------
    draws : `PosteriorDraws`
    names : sequence of str, optional
        Coordinates to summarize, default all.
    max_divergence_rate : float
        Rate above which a divergence warning is recorded.

    Returns
    -------
    response : `Diagnostics`
    """

    names = list(names) if names is not None else list(draws.names)
    n_chains = draws.n_chains
    notes = []

    per_chain = min(np.bincount(draws.chain)[np.unique(draws.chain)]) if len(draws) else 0
    if per_chain < 100:
        notes.append(f"only {per_chain} draws per chain; diagnostics are unreliable")

    rhat = None if n_chains < 2 else np.empty(len(names))
    ess = np.empty(len(names))
    degenerate = []
    for k, name in enumerate(names):
        ary = draws.by_chain(name)
        ess[k] = ess_bulk(ary)
        if rhat is not None:
            rhat[k] = rhat_rank(ary) if np.ptp(ary) > 0 else np.nan
        if np.isnan(ess[k]):
            degenerate.append(name)

    if draws.divergence_rate > max_divergence_rate:
        notes.append(f"divergence rate {draws.divergence_rate:.1%} exceeds {max_divergence_rate:.0%}")
    finite_rhat = rhat[np.isfinite(rhat)] if rhat is not None else np.empty(0)
    if finite_rhat.size and finite_rhat.max() > RHAT_WARNING:
        notes.append(f"max R-hat {finite_rhat.max():.3f} exceeds {RHAT_WARNING}")
    finite_ess = ess[np.isfinite(ess)]
    if finite_ess.size and finite_ess.min() < ESS_WARNING:
        notes.append(f"min bulk ESS {finite_ess.min():.0f} below {ESS_WARNING}")
    for note in notes:
        warnings.warn(note, SamplerWarning)

    return Diagnostics(names=names, rhat=rhat, ess_bulk=ess, divergences=draws.divergences,
                       n_draws=len(draws), n_chains=n_chains, degenerate=degenerate, warnings=notes)


def fit(data: TrialDataset, hp: Optional[HyperPriors] = None, cfg: Optional[SamplerConfig] = None,
        outcome_periods=None, mediator_lag=0, path=None, metadata=None, verbose=False) -> PosteriorDraws:
    """
    Sample the posterior of the observed-data model for a trial.

    Parameters
    ----------
    data : `~wedgepce.trial_data.TrialDataset`
        A validated dataset with at least two clusters and some observed outcomes.
    hp : `~wedgepce.model.HyperPriors`, optional
    cfg : `SamplerConfig`
        Must carry a seed.
    outcome_periods : sequence of int, optional
        Defaults to ``2..T``.
    mediator_lag : {0, 1}
    path : str, optional
        If given, the draws are written there (plus the JSON manifest).
    metadata : dict, optional
        Extra provenance for the manifest.
    verbose : bool
        If True, log progress and timing.

    Returns
    -------
    response : `PosteriorDraws`
        Model parameters (and latents when ``cfg.keep_latents``), with a layout
        for the constrained view.
    """

    cfg = cfg or SamplerConfig()
    hp = hp or HyperPriors()

    if len(data.cluster_ids) < 2:
        raise TrialDataError(f"At least two clusters are needed, found {len(data.cluster_ids)}.")
    model = ObservedDataModel.from_dataset(data, hyperpriors=hp, outcome_periods=outcome_periods,
                                           mediator_lag=mediator_lag)
    if model.n_outcome_rows == 0:
        raise TrialDataError("No observed outcome rows in the modeled periods.")

    layout = model.layout
    if verbose:
        log.info(f"Fitting {model.n_mediator_rows} mediator rows and {model.n_outcome_rows} outcome rows "
                 f"({layout.n_clusters} clusters, {layout.n_individuals} individuals)")

    draws = run_hmc(model, model.dim, cfg, names=layout.names, verbose=verbose)

    keep = slice(None) if cfg.keep_latents else slice(0, layout.n_params)
    info = dict(draws.metadata)
    info.update({"hyperpriors": {"fixed_effect_variance": hp.fixed_effect_variance, "scale_rate": hp.scale_rate},
                 "mediator_lag": mediator_lag, "latents": bool(cfg.keep_latents)})
    info.update(metadata or {})
    draws = PosteriorDraws(draws.values[:, keep], draws.names[keep], draws.chain, layout=layout,
                           accept_stat=draws.accept_stat, divergent=draws.divergent, step_size=draws.step_size,
                           metadata=info)

    if path is not None:
        draws.write(path)
    return draws
