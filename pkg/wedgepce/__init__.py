# Licensed under a 3-clause BSD style license - see LICENSE.rst

# Packages may add whatever they like to this file, but
# should keep this content at the top.
# ----------------------------------------------------------------------------
from ._astropy_init import *  # noqa
# ----------------------------------------------------------------------------

# Enforce Python version check during package import.
# This is the same check as the one at the top of setup.py
import sys

__minimum_python_version__ = "3.9"


class UnsupportedPythonError(Exception):
    pass


if sys.version_info < tuple((int(val) for val in __minimum_python_version__.split('.'))):
    raise UnsupportedPythonError("wedgepce does not support Python < {}".format(__minimum_python_version__))


if not _ASTROPY_SETUP_:  # noqa
    from .trial_data import TrialDataset, load_csv, write_csv, validate, observed_rows  # noqa
    from .model import ModelParams, HyperPriors, ObservedDataModel  # noqa
    from .simulator import DesignSpec, TruthParams, simulate_trial, true_pce_oracle  # noqa
    from .sampler import SamplerConfig, PosteriorDraws, fit, diagnostics  # noqa
    from .calibration import calibrate, sensitivity_config, SensitivityConfig  # noqa
    from .pce import PceQuery, pce_for_draw, pce_posterior, delta_sweep, default_intervals  # noqa
