import warnings

import numpy as np
import pytest

from astropy.utils.data import get_pkg_data_filename

from .utils_for_test import make_params, small_trial
from .. import calibration
from ..calibration import (AuxiliaryFit, SensitivityBounds, SensitivityConfig, _irls, calibrate,
                           estimate_rho_star, fit_auxiliary_glm, lambda_bounds, rho_grid, sample_lambda,
                           sensitivity_config)
from ..exceptions import (CalibrationError, DataWarning, InputWarning, NonConvergenceError, ParameterError, RankError,
                          SeparationError)
from ..sampler import PosteriorDraws
from ..trial_data import TrialDataset, load_csv, observed_rows

TINY_PREVIOUS = [0.5, -0.3, 0.4]
TINY_CURRENT = [1.2, 0.8, 1.9]


def tiny_trial():
    return load_csv(get_pkg_data_filename("data/tiny_trial.csv"))


def test_estimate_rho_star():

    bounds = estimate_rho_star(tiny_trial())
    assert bounds.n_transition == 3
    assert bounds.rho_star == pytest.approx(np.corrcoef(TINY_PREVIOUS, TINY_CURRENT)[0, 1], rel=1e-12)
    assert bounds.rho_star_by_period == {}
    assert bounds.lambda0_lower is None


def test_estimate_rho_star_per_period():

    with pytest.warns(DataWarning, match="transition pairs"):
        bounds = estimate_rho_star(tiny_trial(), per_period=True)
    assert bounds.n_transition_by_period == {2: 2, 3: 1}
    assert bounds.rho_star_by_period == {2: None, 3: None}
    assert bounds.rho_star is not None


def test_estimate_rho_star_too_few_pairs():

    data = tiny_trial()
    c1_only = TrialDataset.from_records([r for r in data.records if r.cluster_id == "c1"], n_periods=3)
    with pytest.raises(CalibrationError, match=r"\|C\| = 2"):
        estimate_rho_star(c1_only)


def test_irls():

    x = np.array([-1.0] * 4 + [1.0] * 4)
    y = np.array([0, 0, 0, 1, 0, 1, 1, 1], dtype=float)
    design = np.column_stack([np.ones(8), x])
    coef, iterations = _irls(design, y)
    assert coef == pytest.approx([0.0, np.log(3.0)], abs=1e-8)
    assert iterations > 0

    with pytest.raises(RankError):
        _irls(np.column_stack([np.ones(8), x, 2 * x]), y)
    with pytest.raises(RankError):
        _irls(design[:1], y[:1])

    separated = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    with pytest.raises(SeparationError):
        _irls(design, separated)


def test_fit_auxiliary_glm():

    # Every previous outcome on the tiny transition set is 0
    with pytest.raises(SeparationError):
        fit_auxiliary_glm(observed_rows(tiny_trial()))

    data, _ = small_trial(seed=5)
    aux = fit_auxiliary_glm(observed_rows(data))
    assert aux.n_obs == 60
    assert len(aux.zeta) == 3 and len(aux.theta) == 3
    assert np.all(np.isfinite(aux.zeta + aux.theta))


def test_lambda_bounds():

    draws = PosteriorDraws.from_params([make_params(), make_params(beta=(0.5, 0.6, 0.4, 0.0))])
    aux = AuxiliaryFit(zeta=(0.0, 0.1, 0.2), theta=(0.0, 0.3, 0.4), n_obs=10)

    bounds = lambda_bounds(aux, draws)
    assert bounds.arm(0) == pytest.approx((0.1, 0.7))
    assert bounds.arm(1) == pytest.approx((0.4, 1.0))
    assert bounds.lambda0_upper_draws is None
    assert bounds.fallback(0) is None

    bounds = lambda_bounds(aux, draws, per_draw=True)
    assert bounds.lambda0_upper_draws == pytest.approx([0.8, 0.6])
    assert bounds.lambda1_upper_draws == pytest.approx([1.0, 1.0])

    with pytest.raises(ParameterError, match="empty"):
        lambda_bounds(aux, draws.subset(np.array([], dtype=int)))


def test_rho_grid():

    assert rho_grid(0.654) == pytest.approx([0.654, 0.7, 0.8, 0.9])
    assert rho_grid(0.7) == pytest.approx([0.7, 0.8, 0.9])
    assert rho_grid(0.95) == [0.95]

    grid = rho_grid(-0.05)
    assert grid[:3] == pytest.approx([-0.05, 0.0, 0.1])
    assert len(grid) == 11

    for bad in (1.0, -1.0):
        with pytest.raises(ParameterError, match="rho_star"):
            rho_grid(bad)


def test_sample_lambda():

    bounds = SensitivityBounds(lambda0_lower=0.0, lambda0_upper=1.0, lambda1_lower=0.5, lambda1_upper=0.2)
    assert bounds.fallback(1) == "midpoint"

    with pytest.warns(InputWarning, match="lambda1 bounds are inverted"):
        lambda0, lambda1 = sample_lambda(bounds, 4000, seed=(3,))
    assert np.all(lambda1 == pytest.approx(0.35))
    assert np.all((lambda0 >= 0) & (lambda0 <= 1))
    # Triangular with the mode at the lower bound has mean (2 lower + upper) / 3
    assert lambda0.mean() == pytest.approx(1 / 3, abs=0.03)
    assert np.median(lambda0) < 0.5

    with pytest.warns(InputWarning):
        again = sample_lambda(bounds, 4000, seed=(3,))
    assert np.array_equal(again[0], lambda0)

    equal = SensitivityBounds(lambda0_lower=0.3, lambda0_upper=0.3, lambda1_lower=0.0, lambda1_upper=2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lambda0, lambda1 = sample_lambda(equal, 10, seed=1)
    assert np.all(lambda0 == pytest.approx(0.3))

    per_draw = SensitivityBounds(lambda0_lower=0.0, lambda0_upper=1.0, lambda1_lower=0.0, lambda1_upper=1.0,
                                 lambda0_upper_draws=np.array([0.1, 0.2, 0.3]),
                                 lambda1_upper_draws=np.array([1.0, 2.0, 3.0]))
    lambda0, lambda1 = sample_lambda(per_draw, 3, seed=2)
    assert np.all(lambda0 <= [0.1, 0.2, 0.3])
    assert np.all(lambda1 <= [1.0, 2.0, 3.0])

    with pytest.raises(ParameterError, match="count"):
        sample_lambda(bounds, 0, seed=1)
    with pytest.raises(ParameterError, match="not calibrated"):
        sample_lambda(SensitivityBounds(rho_star=0.5), 5, seed=1)


def test_sensitivity_bounds():

    with pytest.raises(ParameterError, match="rho_star"):
        SensitivityBounds(rho_star=1.5)
    with pytest.raises(ParameterError, match="lambda0_upper"):
        SensitivityBounds(lambda0_upper=np.inf)

    bounds = SensitivityBounds(rho_star=0.6, rho_star_by_period={2: 0.5, 3: None}, n_transition=12,
                               n_transition_by_period={2: 8, 3: 4}, lambda0_lower=0.1, lambda0_upper=0.2,
                               lambda1_lower=0.4, lambda1_upper=0.3, lambda0_upper_draws=np.array([0.2, 0.25]),
                               zeta=(0.0, 0.1, 0.2), theta=(0.0, 0.3, 0.4))
    values = bounds.to_dict()
    assert values["rho_star_by_period"] == {"2": 0.5, "3": None}
    assert values["lambda1"]["fallback"] == "midpoint"
    assert values["lambda1"]["upper_draws"] is None
    assert SensitivityBounds.from_dict(values).to_dict() == values


def test_sensitivity_config():

    bounds = SensitivityBounds(rho_star=0.654, lambda0_lower=0.0, lambda0_upper=1.0, lambda1_lower=0.0,
                               lambda1_upper=1.0)
    cfg = sensitivity_config(bounds)
    assert cfg.rho_grid == pytest.approx((0.654, 0.7, 0.8, 0.9))
    assert cfg.fallback == {"lambda0": None, "lambda1": None}
    assert SensitivityConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    lambda0, lambda1 = cfg.draw_lambda(5, (1,))
    assert len(lambda0) == len(lambda1) == 5

    fixed = sensitivity_config(bounds, rule="fixed", lambda0=0.2, lambda1=-0.1, rho_values=[0.5])
    assert fixed.rho_grid == (0.5,)
    lambda0, lambda1 = fixed.draw_lambda(3, 7)
    assert list(lambda0) == [0.2] * 3
    assert list(lambda1) == [-0.1] * 3

    with pytest.raises(ParameterError, match="fixed lambda rule"):
        SensitivityConfig(rho_grid=(0.5,), rule="fixed", lambda0=0.1)
    with pytest.raises(ParameterError, match="calibrated bounds"):
        SensitivityConfig(rho_grid=(0.5,))
    with pytest.raises(ParameterError, match="rho grid"):
        SensitivityConfig(rho_grid=(1.0,), rule="fixed", lambda0=0.0, lambda1=0.0)
    with pytest.raises(ParameterError, match="Unknown lambda rule"):
        SensitivityConfig(rho_grid=(0.5,), rule="uniform", bounds=bounds)
    with pytest.raises(ParameterError, match="rho_star"):
        sensitivity_config(SensitivityBounds())


def test_calibrate():

    data, _ = small_trial(seed=5)
    draws = PosteriorDraws.from_params([make_params(), make_params(beta=(0.5, 0.6, 0.4, 0.0))])

    bounds = calibrate(data, draws, per_period=True, per_draw=True)
    assert bounds.n_transition == 60
    assert bounds.n_transition_by_period == {2: 20, 3: 20, 4: 20}
    assert -1 < bounds.rho_star < 1
    assert all(r is not None for r in bounds.rho_star_by_period.values())
    assert bounds.lambda0_upper == pytest.approx(0.7)
    assert bounds.lambda1_upper_draws == pytest.approx([1.0, 1.0])
    assert bounds.zeta is not None


def test_lambda_bounds_reference_values():

    draws = PosteriorDraws.from_params([make_params(beta=(0.5, 0.254, -0.162, 0.0))])
    aux = AuxiliaryFit(zeta=(0.0, 0.048, 0.0), theta=(0.0, 0.0, -0.006), n_obs=100)

    bounds = lambda_bounds(aux, draws)
    assert bounds.arm(0) == pytest.approx((0.048, 0.254))
    assert bounds.arm(1) == pytest.approx((-0.006, 0.092))

    n = 100_000
    lambda0, lambda1 = sample_lambda(bounds, n, seed=4)
    for values, (lower, upper) in ((lambda0, bounds.arm(0)), (lambda1, bounds.arm(1))):
        se = (upper - lower) / np.sqrt(18 * n)
        assert abs(values.mean() - (2 * lower + upper) / 3) < 4 * se


@pytest.mark.slow
def test_rho_star_does_not_exceed_shared_correlation():

    # Weak cluster effects keep the pairs close to independent
    params = make_params(n_periods=3, sigma_alpha=(0.1, 0.3), sigma_phi=(0.5, 0.4))
    shared = 0.1**2 + 0.5**2
    rho_true = shared / (shared + 1.0)

    covered = 0
    for seed in range(20):
        data, _ = small_trial(seed=100 + seed, n_clusters=8, cohort_size=30, n_periods=3, params=params)
        bounds = estimate_rho_star(data)
        se = (1 - bounds.rho_star**2) / np.sqrt(bounds.n_transition - 3)
        covered += bounds.rho_star <= rho_true + 2 * se
    assert covered >= 18


def test_fit_auxiliary_glm_stalled(monkeypatch):

    x = np.array([-1.0] * 4 + [1.0] * 4)
    y = np.array([0, 0, 0, 1, 0, 1, 1, 1], dtype=float)
    with pytest.raises(NonConvergenceError, match="did not converge"):
        _irls(np.column_stack([np.ones(8), x]), y, max_iter=1)

    def stalled(design, y):
        raise NonConvergenceError("IRLS did not converge in 100 iterations.")

    monkeypatch.setattr(calibration, "_irls", stalled)
    data, _ = small_trial(seed=5)
    with pytest.raises(CalibrationError, match="previous outcome did not converge"):
        fit_auxiliary_glm(observed_rows(data))
