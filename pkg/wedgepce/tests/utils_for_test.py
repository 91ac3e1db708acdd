import numpy as np

from ..model import ModelParams
from ..simulator import DesignSpec, TruthParams, simulate_trial
from ..trial_data import COLUMNS


def make_params(n_periods=4, outcome_periods=None, **kwargs):
    """
    A plausible parameter set with moderate random-effect correlations.
    """

    if outcome_periods is None:
        outcome_periods = tuple(range(2, n_periods + 1))
    values = dict(eta1=0.1 * np.arange(n_periods), eta2=[-0.5 + 0.1 * k for k in range(len(outcome_periods))],
                  outcome_periods=outcome_periods, gamma1=1.0, beta=(0.5, 0.8, 0.2, 0.0), sigma_eps=1.0,
                  sigma_alpha=(0.4, 0.3), rho_alpha=0.3, sigma_phi=(0.5, 0.4), rho_phi=0.2)
    values.update(kwargs)
    return ModelParams(**values)


def small_trial(seed=7, n_clusters=6, cohort_size=10, n_periods=4, params=None, rho=0.5, **design):
    """
    Simulated trial with a staircase rollout; returns the dataset and its truth.
    """

    params = params or make_params(n_periods)
    truth = TruthParams(params, rho=rho)
    spec = DesignSpec(n_clusters=n_clusters, n_periods=n_periods, cohort_size=cohort_size, **design)
    return simulate_trial(spec, truth, seed), truth


def write_rows(path, rows, header=COLUMNS):
    """
    Write CSV text rows (tuples of already formatted fields).
    """

    with open(path, "w") as fle:
        fle.write(",".join(header) + "\n")
        for row in rows:
            fle.write(",".join(str(v) for v in row) + "\n")
    return path
