import numpy as np
import pytest

from astropy.utils.data import get_pkg_data_filename

from ..exceptions import DataWarning, TrialDataError
from ..trial_data import (ObservationRecord, TrialDataset, arm_contrasts, load_csv, observed_rows, validate,
                          write_csv)
from ..utils.utils import file_digest
from .utils_for_test import small_trial, write_rows

TINY_TRIAL = get_pkg_data_filename('data/tiny_trial.csv')
COLUMNS_WITHOUT_OUTCOME = ('cluster_id', 'individual_id', 'period', 'treatment', 'mediator')


def records_from(rows):
    return [ObservationRecord(*row) for row in rows]


def test_load_csv():

    data = load_csv(TINY_TRIAL)
    assert len(data) == 12
    assert data.n_periods == 3
    assert data.cluster_ids == ("c1", "c2")
    assert data.individual_keys == (("c1", "i1"), ("c1", "i2"), ("c2", "i1"), ("c2", "i2"))

    assert data.treatment("c1", 2) == 1
    assert data.treatment("c2", 2) == 0
    assert data.treatment("c2", 0) == 0
    assert data.treatment("c9", 1) is None

    starts = {c.cluster_id: c.start_period for c in data.clusters}
    assert starts == {"c1": 2, "c2": 3}
    assert data.clusters[0].cohort_size == 2

    last = data.records[-1]
    assert last == ObservationRecord("c2", "i2", 3, 1, None, None)
    assert not last.observed

    # table is a copy
    table = data.table
    table['period'][0] = 99
    assert data.table['period'][0] == 1


def test_row_order_is_not_significant(tmp_path):

    data = load_csv(TINY_TRIAL)
    with open(TINY_TRIAL) as fle:
        header, *lines = fle.read().splitlines()
    shuffled = tmp_path / "shuffled.csv"
    shuffled.write_text("\n".join([header] + lines[::-1]) + "\n")

    assert load_csv(shuffled).records == data.records


def test_write_csv(tmp_path):

    data, _ = small_trial(seed=3, n_clusters=3, cohort_size=4, dropout_hazard=0.2)

    first = write_csv(data, tmp_path / "first.csv")
    second = write_csv(load_csv(first), tmp_path / "second.csv")
    assert file_digest(first) == file_digest(second)
    assert load_csv(second).records == data.records

    # missing values are written as empty fields
    text = (tmp_path / "first.csv").read_text()
    if any(not r.observed for r in data.records):
        assert ",,\n" in text


def test_load_csv_errors(tmp_path):

    with pytest.raises(TrialDataError, match="not found"):
        load_csv(tmp_path / "nothing.csv")

    bad_outcome = write_rows(tmp_path / "outcome.csv", [("c1", "i1", 1, 0, 0.5, 0), ("c1", "i1", 2, 1, 0.4, 2)])
    with pytest.raises(TrialDataError, match="line 3: outcome must be 0 or 1") as err:
        load_csv(bad_outcome)
    assert err.value.line == 3

    bad_mediator = write_rows(tmp_path / "mediator.csv", [("c1", "i1", 1, 0, "high", 0)])
    with pytest.raises(TrialDataError, match="line 2: mediator"):
        load_csv(bad_mediator)

    bad_header = write_rows(tmp_path / "header.csv", [("c1", "i1", 1, 0, 0.5)], header=COLUMNS_WITHOUT_OUTCOME)
    with pytest.raises(TrialDataError, match="line 1"):
        load_csv(bad_header)

    # a parseable but invalid dataset carries its report
    invalid = write_rows(tmp_path / "invalid.csv", [("c1", "i1", 1, 1, 0.5, 0), ("c1", "i1", 2, 0, 0.4, 1)])
    with pytest.raises(TrialDataError) as err:
        load_csv(invalid)
    assert "staggered_rollout" in err.value.report.kinds()
    assert load_csv(invalid, check=False).n_periods == 2


def test_validate():

    assert validate(load_csv(TINY_TRIAL)).ok
    assert str(validate(load_csv(TINY_TRIAL))) == "dataset is valid"

    data = TrialDataset.from_records(records_from([
        ("c1", "i1", 1, 0, 0.1, 0),
        ("c1", "i1", 2, 1, 0.2, 1),
        ("c1", "i1", 3, 0, 0.3, 1),      # treatment switches off
        ("c1", "i2", 1, 0, 0.1, 0),
        ("c1", "i2", 2, 0, 0.5, 0),      # disagrees with c1/i1 at period 2
        ("c1", "i2", 3, 0, None, 1),     # mediator missing, outcome present
        ("c2", "i1", 2, 0, 0.1, 0),      # no baseline record
        ("c2", "i1", 2, 0, 0.1, 0),      # duplicate
        ("c2", "i2", 1, 0, None, None),
        ("c2", "i2", 2, 0, 0.4, 1),      # observed after dropping out
        ("c2", "i2", 3, None, 0.4, 1),   # missing treatment
    ]), n_periods=3)

    report = validate(data)
    assert not report.ok
    assert report.kinds() == {"staggered_rollout", "inconsistent_treatment", "simultaneous_missingness",
                              "closed_cohort", "duplicate_record", "monotone_dropout", "missing_treatment"}
    assert report.by_kind("duplicate_record")[0].individual_id == "i1"
    assert report.by_kind("monotone_dropout")[0].period == 2
    assert len(report.to_table()) == len(report)
    assert "violation(s)" in str(report)

    out_of_range = TrialDataset.from_records(records_from([("c1", "i1", 1, 0, 0.1, 0), ("c1", "i1", 2, 1, 0.1, 0)]),
                                             n_periods=1)
    assert "period_range" in validate(out_of_range).kinds()


def test_observed_rows():

    data = load_csv(TINY_TRIAL)
    view = observed_rows(data)
    assert len(view) == 11

    first = view.table[0]
    assert first['period'] == 1 and first['lag_treatment'] == 0
    assert np.isnan(first['lag_mediator']) and np.isnan(first['lag_outcome'])

    second = view.table[1]
    assert second['lag_mediator'] == 0.5 and second['lag_outcome'] == 0 and second['lag_treatment'] == 0

    transition = view.transition_rows()
    assert len(transition) == 3
    assert sorted(transition.column('lag_mediator')) == [-0.3, 0.4, 0.5]
    assert sorted(transition.column('mediator')) == [0.8, 1.2, 1.9]

    lagged = observed_rows(data, require_lag=True)
    assert len(lagged) == 7
    assert np.all(lagged.has_lag)
    assert len(observed_rows(data, require_lag=True, outcome_periods=[3])) == 3

    assert len(view.concatenate(transition)) == 14


def test_observed_rows_empty():

    data = TrialDataset.from_records([ObservationRecord("c1", "i1", 1, 0)], n_periods=2)
    with pytest.warns(DataWarning, match="No observed rows"):
        view = observed_rows(data)
    assert len(view) == 0


def test_arm_contrasts():

    table = arm_contrasts(load_csv(TINY_TRIAL))
    assert list(table['period']) == [2, 3]

    period2 = table[0]
    assert period2['n_treated'] == 2 and period2['n_control'] == 2 and period2['n_initiating'] == 2
    assert period2['treated_rate'] == 0.5 and period2['control_rate'] == 0.0
    assert period2['difference'] == 0.5
    assert period2['initiation_difference'] == 0.5

    period3 = table[1]
    assert period3['treated_rate'] == 1.0
    assert period3['n_control'] == 0 and np.isnan(period3['control_rate'])
    assert period3['initiation_rate'] == 1.0
