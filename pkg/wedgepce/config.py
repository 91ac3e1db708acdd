# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Run configuration: one INI-style file with nested sections, validated
against `CONFIG_SPEC` by ``configobj``, plus command-line overrides.
"""

import warnings
from pathlib import Path

import numpy as np
from astropy.extern.configobj import configobj, validate

from .calibration import sensitivity_config
from .exceptions import ConfigError, InputWarning, InvalidInputError, ParameterError
from .model import HyperPriors, ModelParams
from .pce import PceQuery, default_intervals
from .sampler import SamplerConfig
from .simulator import DesignSpec, TruthParams
from .utils.utils import parse_threads

__all__ = ['CONFIG_SPEC', 'RunConfig', 'load_config', 'parse_override']

CONFIG_SPEC = """
seed = integer(min=0, default=None)
threads = string(default='1')

[paths]
data = string(default=None)
workspace = string(default='.')

[design]
n_clusters = integer(min=2, default=8)
n_periods = integer(min=2, default=5)
cohort_size = integer(min=1, default=30)
start_periods = int_list(default=list())
dropout_hazard = float(min=0.0, max=1.0, default=0.0)
dropout_slope = float(default=0.0)
baseline_outcome_prob = float(min=0.0, max=1.0, default=0.2)

[truth]
eta1 = float_list(default=list())
eta2 = float_list(default=list())
gamma1 = float(default=1.0)
beta = float_list(min=4, max=4, default=list(0.5, 0.4, 0.1, 0.0))
sigma_eps = float(min=0.0, default=1.0)
sigma_alpha = float_list(min=2, max=2, default=list(0.5, 0.5))
rho_alpha = float(min=-1.0, max=1.0, default=0.3)
sigma_phi = float_list(min=2, max=2, default=list(0.5, 0.5))
rho_phi = float(min=-1.0, max=1.0, default=0.3)
rho = float(min=-1.0, max=1.0, default=0.5)
lambda0 = float(default=0.0)
lambda1 = float(default=0.0)

[model]
outcome_periods = int_list(default=list())
mediator_lag = integer(min=0, max=1, default=0)

[priors]
fixed_effect_variance = float(default=10.0)
scale_rate = float(default=1.0)

[sampler]
chains = integer(min=1, default=4)
warmup = integer(min=0, default=1000)
samples = integer(min=1, default=1000)
target_accept = float(default=0.8)
max_leapfrog = integer(min=1, default=64)
keep_latents = boolean(default=False)
max_divergence_rate = float(min=0.0, max=1.0, default=0.2)

[calibration]
per_period_rho = boolean(default=False)
per_draw_lambda = boolean(default=False)
lambda_rule = option('triangular', 'fixed', default='triangular')
lambda0 = float(default=None)
lambda1 = float(default=None)

[pce]
periods = int_list(default=list())
cutoff = float(default=0.5)
mc_size = integer(default=2000)
link = option('logit', 'identity', default='logit')
quadrature_order = integer(min=1, max=128, default=20)
exact_delta = boolean(default=False)
delta_values = float_list(default=list(0.5, 1.0, 1.5, 2.0, 2.5, 3.0))
max_failure_rate = float(min=0.0, max=1.0, default=0.05)
""".strip().splitlines()

_SEED_COMMANDS = ('simulate', 'fit', 'calibrate', 'pce')


def _spec_entry(spec, section, key):
    node = spec
    for name in section:
        node = node.get(name, {})
    return node.get(key) if hasattr(node, 'get') else None


def parse_override(text):
    """
    Split ``section.key=value`` (or ``key=value`` for top-level keys).

    Returns
    -------
    response : tuple
        ``(sections, key, value)`` with ``sections`` a list of section names.
    """

    name, sep, value = text.partition('=')
    if not sep or not name.strip():
        raise ConfigError(f"Overrides must look like section.key=value, got {text!r}.")
    *sections, key = [part.strip() for part in name.strip().split('.')]
    return sections, key, value.strip()


def _apply_override(cfg, text):
    sections, key, value = parse_override(text)
    entry = _spec_entry(cfg.configspec, sections, key)
    if entry is None:
        raise ConfigError(f"Unknown configuration key {'.'.join(sections + [key])!r}.")
    if entry.split('(')[0].endswith('_list'):
        value = [v.strip() for v in value.split(',') if v.strip()]

    node = cfg
    for name in sections:
        node = node.setdefault(name, {})
    node[key] = value


def _errors(cfg, result):
    names = []
    for sections, key, error in configobj.flatten_errors(cfg, result):
        name = '.'.join(sections + [key if key is not None else '<section>'])
        names.append(f"{name}: {error if error else 'missing'}")
    return names


class RunConfig():
    """
    Validated run configuration.

    Parameters
    ----------
    values : dict
        Plain nested dict as produced by `load_config`.
    """

    def __init__(self, values):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    def to_dict(self):
        return {key: dict(value) if isinstance(value, dict) else value for key, value in self.values.items()}

    @property
    def seed(self):
        return self.values['seed']

    def require_seed(self, command):
        if self.seed is None and command in _SEED_COMMANDS:
            raise ConfigError(f"Missing required configuration field 'seed' for {command}.")
        return self.seed

    @property
    def threads(self):
        return parse_threads(self.values['threads'])

    @property
    def workspace(self):
        return Path(self.values['paths']['workspace'])

    @property
    def data_path(self):
        data = self.values['paths']['data']
        return Path(data) if data else self.workspace / "data.csv"

    def design(self):
        d = self.values['design']
        return DesignSpec(n_clusters=d['n_clusters'], n_periods=d['n_periods'], cohort_size=d['cohort_size'],
                          start_periods=tuple(d['start_periods']) or None, dropout_hazard=d['dropout_hazard'],
                          dropout_slope=d['dropout_slope'], baseline_outcome_prob=d['baseline_outcome_prob'])

    def outcome_periods(self, n_periods):
        periods = self.values['model']['outcome_periods']
        return tuple(periods) if periods else tuple(range(2, n_periods + 1))

    @property
    def mediator_lag(self):
        return self.values['model']['mediator_lag']

    def truth(self):
        """
        Simulation truth; empty ``eta1`` and ``eta2`` default to the linear
        trends ``0.1 (t - 1)`` and ``-1 + 0.1 (t - 2)``.
        """

        t = self.values['truth']
        n_periods = self.values['design']['n_periods']
        periods = self.outcome_periods(n_periods)
        eta1 = t['eta1'] or list(0.1 * np.arange(n_periods))
        eta2 = t['eta2'] or [-1.0 + 0.1 * (p - 2) for p in periods]
        params = ModelParams(eta1=eta1, eta2=eta2, outcome_periods=periods, gamma1=t['gamma1'], beta=t['beta'],
                             sigma_eps=t['sigma_eps'], sigma_alpha=tuple(t['sigma_alpha']),
                             rho_alpha=t['rho_alpha'], sigma_phi=tuple(t['sigma_phi']), rho_phi=t['rho_phi'])
        return TruthParams(params, rho=t['rho'], lambda0=t['lambda0'], lambda1=t['lambda1'])

    def hyperpriors(self):
        return HyperPriors(**self.values['priors'])

    def sampler(self):
        s = self.values['sampler']
        return SamplerConfig(chains=s['chains'], warmup=s['warmup'], samples=s['samples'],
                             target_accept=s['target_accept'], max_leapfrog=s['max_leapfrog'], seed=self.seed,
                             keep_latents=s['keep_latents'], max_divergence_rate=s['max_divergence_rate'],
                             threads=self.threads)

    def sensitivity(self, bounds):
        c = self.values['calibration']
        return sensitivity_config(bounds, rule=c['lambda_rule'], lambda0=c['lambda0'], lambda1=c['lambda1'])

    def pce_query(self, exact_delta=None):
        p = self.values['pce']
        return PceQuery(periods=tuple(p['periods']), intervals=default_intervals(p['cutoff']), mc_size=p['mc_size'],
                        link=p['link'], quadrature_order=p['quadrature_order'], seed=self.seed,
                        exact_delta=p['exact_delta'] if exact_delta is None else exact_delta,
                        max_failure_rate=p['max_failure_rate'])


def load_config(path=None, overrides=(), seed=None, workspace=None, threads=None):
    """
    Read and validate a run configuration.

    Parameters
    ----------
    path : str or `~pathlib.Path`, optional
        INI file; without it every key takes its default.
    overrides : sequence of str
        ``section.key=value`` settings applied before validation.
    seed, workspace, threads : optional
        Values of the matching global command-line flags; they take
        precedence over the file.

    Returns
    -------
    response : `RunConfig`

    Raises
    ------
    ConfigError
        Unreadable file or invalid values; the message names every offending
        ``section.key``.
    """

    try:
        cfg = configobj.ConfigObj(str(path) if path is not None else None, configspec=CONFIG_SPEC,
                                  file_error=path is not None, interpolation=False)
    except (OSError, configobj.ConfigObjError) as err:
        raise ConfigError(f"Cannot read configuration {path}: {err}")

    for text in overrides:
        _apply_override(cfg, text)
    if seed is not None:
        cfg['seed'] = str(seed)
    if threads is not None:
        cfg['threads'] = str(threads)
    if workspace is not None:
        cfg.setdefault('paths', {})['workspace'] = str(workspace)

    result = cfg.validate(validate.Validator(), preserve_errors=True)
    if result is not True:
        raise ConfigError("Invalid configuration: " + "; ".join(_errors(cfg, result)))

    for sections, key in configobj.get_extra_values(cfg):
        warnings.warn(f"Ignoring unknown configuration key {'.'.join(list(sections) + [key])!r}.", InputWarning)

    values = cfg.dict()
    try:
        parse_threads(values['threads'])
    except InvalidInputError as err:
        raise ConfigError(f"threads: {err}")
    try:
        default_intervals(values['pce']['cutoff'])
        [default_intervals(d) for d in values['pce']['delta_values']]
    except ParameterError as err:
        raise ConfigError(f"pce.cutoff/pce.delta_values: {err}")
    return RunConfig(values)
