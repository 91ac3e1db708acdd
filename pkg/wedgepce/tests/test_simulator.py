import numpy as np
import pytest
from scipy import stats

from ..exceptions import DegenerateStratumError, ParameterError
from ..simulator import DesignSpec, TruthParams, apply_dropout, simulate_trial, true_pce_oracle
from ..trial_data import validate
from ..utils.numerics import Interval
from .utils_for_test import make_params, small_trial


def test_design_spec():

    assert DesignSpec.staircase(8, 5) == (2, 2, 3, 3, 4, 4, 5, 5)
    assert DesignSpec.staircase(3, 4) == (2, 3, 4)

    design = DesignSpec(n_clusters=3, n_periods=4)
    assert design.start_periods == (2, 3, 4)
    assert design.schedule.tolist() == [[0, 1, 1, 1], [0, 0, 1, 1], [0, 0, 0, 1]]
    assert design.treatment(1, 2) == 0 and design.treatment(1, 3) == 1
    assert design.to_dict()["start_periods"] == [2, 3, 4]

    custom = DesignSpec(n_clusters=2, n_periods=3, start_periods=(3, 2))
    assert custom.schedule.tolist() == [[0, 0, 1], [0, 1, 1]]

    with pytest.raises(ParameterError, match="Start periods"):
        DesignSpec(n_clusters=2, n_periods=3, start_periods=(1, 2))
    with pytest.raises(ParameterError, match="start periods given"):
        DesignSpec(n_clusters=2, n_periods=3, start_periods=(2,))
    with pytest.raises(ParameterError, match="two periods"):
        DesignSpec(n_periods=1)
    with pytest.raises(ParameterError, match="hazard"):
        DesignSpec(dropout_hazard=1.0)


def test_truth_params():

    truth = TruthParams(make_params(4), rho=0.6, lambda0=0.1, lambda1=-0.2)
    same = TruthParams.from_dict(truth.to_dict())
    assert same.to_dict() == truth.to_dict()

    with pytest.raises(ParameterError):
        TruthParams(make_params(4), rho=1.5)


def test_simulate_trial():

    data, truth = small_trial(seed=5, n_clusters=4, cohort_size=5, n_periods=4)
    assert len(data) == 4 * 5 * 4
    assert data.cluster_ids == ("c01", "c02", "c03", "c04")
    assert data.individual_keys[0] == ("c01", "i001")
    assert validate(data).ok
    assert all(r.observed for r in data.records)

    starts = [c.start_period for c in data.clusters]
    assert starts == list(DesignSpec.staircase(4, 4))

    again, _ = small_trial(seed=5, n_clusters=4, cohort_size=5, n_periods=4)
    assert again.records == data.records
    other, _ = small_trial(seed=6, n_clusters=4, cohort_size=5, n_periods=4)
    assert other.records != data.records


def test_simulate_trial_moments():

    params = make_params(3, sigma_alpha=(0.2, 0.3))
    design = DesignSpec(n_clusters=20, n_periods=3, cohort_size=100, baseline_outcome_prob=0.3)
    data = simulate_trial(design, TruthParams(params), seed=9)

    _, _, period, treatment, mediator, outcome = data.arrays()

    # period 1 is all control with no outcome model
    at_baseline = period == 1
    assert np.all(treatment[at_baseline] == 0)
    assert abs(outcome[at_baseline].mean() - 0.3) < 0.05
    assert abs(mediator[at_baseline].mean() - params.eta1[0]) < 0.25
    assert abs(mediator[at_baseline].var() - params.mediator_variance) < 0.2

    # treatment shifts the mediator by gamma1 within a period
    at_2 = period == 2
    shift = mediator[at_2 & (treatment == 1)].mean() - mediator[at_2 & (treatment == 0)].mean()
    assert abs(shift - params.gamma1) < 0.4


def test_simulate_trial_errors():

    with pytest.raises(ParameterError, match="periods"):
        simulate_trial(DesignSpec(n_periods=3), TruthParams(make_params(4)), seed=1)
    with pytest.raises(ParameterError, match="period 1"):
        simulate_trial(DesignSpec(n_periods=3), TruthParams(make_params(3, outcome_periods=(1, 2, 3))), seed=1,
                       mediator_lag=1)
    with pytest.raises(ParameterError, match="seed"):
        simulate_trial(DesignSpec(n_periods=3), TruthParams(make_params(3)), seed=None)


def test_simulate_trial_with_lagged_mediator():

    data = simulate_trial(DesignSpec(n_clusters=3, n_periods=3, cohort_size=4), TruthParams(make_params(3)),
                          seed=2, mediator_lag=1)
    assert validate(data).ok


def test_apply_dropout():

    data, _ = small_trial(seed=1, n_clusters=6, cohort_size=50, n_periods=4)

    assert apply_dropout(data, 0.0, seed=3).records == data.records

    dropped = apply_dropout(data, 0.3, seed=3)
    assert validate(dropped).ok
    assert apply_dropout(data, 0.3, seed=3).records == dropped.records
    assert len(dropped) == len(data)

    # individuals still observed at the last period: (1 - h)^(T - 1)
    _, _, period, _, mediator, _ = dropped.arrays()
    retained = np.mean(~np.isnan(mediator[period == 4]))
    assert abs(retained - 0.7**3) < 0.1

    # period 1 is never missing
    assert not np.any(np.isnan(mediator[period == 1]))

    with pytest.raises(ParameterError):
        apply_dropout(data, 1.0, seed=3)


def test_apply_dropout_outcome_dependence():

    data, _ = small_trial(seed=4, n_clusters=6, cohort_size=80, n_periods=3)
    _, _, period, _, _, outcome = data.arrays()
    previous = outcome[period == 1]

    dropped = apply_dropout(data, 0.2, seed=8, slope=3.0)
    _, _, period2, _, mediator, _ = dropped.arrays()
    gone = np.isnan(mediator[period2 == 2])

    # dropout at period 2 is far more likely after Y = 1
    assert gone[previous == 1].mean() > gone[previous == 0].mean() + 0.2


def test_oracle_null_effect():

    # the outcome ignores mediator and treatment: every principal effect is zero
    params = make_params(3, beta=(0.0, 0.0, 0.0, 0.0), sigma_alpha=(0.4, 0.0), sigma_phi=(0.5, 0.0))
    truth = TruthParams(params, rho=0.4)
    for interval in (Interval(-0.5, 0.5), Interval(0.5, np.inf)):
        result = true_pce_oracle(truth, 2, interval, 20000, seed=3)
        assert abs(result.value) < 1e-9
        assert float(result) == result.value


def test_oracle():

    truth = TruthParams(make_params(3), rho=0.5, lambda0=0.2, lambda1=0.4)
    interval = Interval(-0.5, 0.5)
    result = true_pce_oracle(truth, 3, interval, 20000, seed=11, grid_size=201)

    v = truth.params.mediator_variance
    sd = np.sqrt(2 * (1 - truth.rho) * v)
    expected = stats.norm.cdf(0.5, loc=1.0, scale=sd) - stats.norm.cdf(-0.5, loc=1.0, scale=sd)
    assert result.strata_probability == pytest.approx(expected, rel=1e-12)
    assert abs(result.n_accepted / 20000 - expected) < 0.02
    assert 0 < result.mc_se < 0.05
    assert -1 < result.value < 1

    same = true_pce_oracle(truth, 3, interval, 20000, seed=11, grid_size=201)
    assert same.value == result.value

    identity = true_pce_oracle(truth, 3, interval, 20000, seed=11, link='identity', grid_size=201)
    assert np.isfinite(identity.value)

    with pytest.raises(ParameterError, match="at least"):
        true_pce_oracle(truth, 3, interval, 500, seed=1)
    with pytest.raises(ParameterError, match="link"):
        true_pce_oracle(truth, 3, interval, 20000, seed=1, link='probit')
    with pytest.raises(DegenerateStratumError):
        true_pce_oracle(truth, 3, Interval(40, np.inf), 20000, seed=1)
