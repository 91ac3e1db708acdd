# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
This module defines the stepped-wedge trial dataset: records, validation,
CSV input/output and the lagged view used by the model and calibration.
"""

import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from astropy.io import ascii
from astropy.table import Column, MaskedColumn, Table

from .exceptions import DataWarning, TrialDataError
from .utils.utils import format_float

__all__ = ['COLUMNS', 'ObservationRecord', 'ClusterDescriptor', 'TrialDataset', 'Violation',
           'ValidationReport', 'LaggedView', 'load_csv', 'write_csv', 'validate', 'observed_rows',
           'arm_contrasts']

COLUMNS = ('cluster_id', 'individual_id', 'period', 'treatment', 'mediator', 'outcome')
SORT_KEYS = ['cluster_id', 'individual_id', 'period']


@dataclass(frozen=True)
class ObservationRecord:
    """
    One (individual, cluster, period) observation.

    ``mediator`` and ``outcome`` are None when missing.
    """

    cluster_id: str
    individual_id: str
    period: int
    treatment: Optional[int]
    mediator: Optional[float] = None
    outcome: Optional[int] = None

    @property
    def observed(self):
        return self.mediator is not None and self.outcome is not None


@dataclass(frozen=True)
class ClusterDescriptor:
    """
    Cluster summary derived from the records.

    ``treatment_sequence[t - 1]`` is the cluster treatment at period ``t``
    (None if the cluster has no record for that period).
    """

    cluster_id: str
    cohort_size: int
    treatment_sequence: Tuple[Optional[int], ...]

    @property
    def start_period(self):
        """First treated period, or None if the cluster is never treated."""
        for period, z in enumerate(self.treatment_sequence, start=1):
            if z == 1:
                return period
        return None


def _masked(col, dtype):
    """Typed masked column from anything array-like; NaN counts as missing."""

    data = np.ma.asarray(col)
    mask = np.ma.getmaskarray(data).copy()
    if data.dtype.kind == 'f':
        mask |= np.isnan(data.filled(0.0))
    values = data.filled(0).astype(dtype)
    return MaskedColumn(values, mask=mask)


def _normalize_table(table):
    """Canonical column types and sort order for a trial table."""

    missing = [name for name in COLUMNS if name not in table.colnames]
    if missing:
        raise TrialDataError(f"Trial table is missing column(s): {', '.join(missing)}")

    for name in ('cluster_id', 'individual_id', 'period'):
        if np.any(np.ma.getmaskarray(np.ma.asarray(table[name]))):
            raise TrialDataError(f"Column {name} may not contain missing values.")

    out = Table()
    out['cluster_id'] = Column(np.asarray(table['cluster_id']).astype(str))
    out['individual_id'] = Column(np.asarray(table['individual_id']).astype(str))
    out['period'] = Column(np.asarray(table['period']).astype(int))
    out['treatment'] = _masked(table['treatment'], int)
    out['mediator'] = _masked(table['mediator'], float)
    out['outcome'] = _masked(table['outcome'], int)
    if len(out):
        out.sort(SORT_KEYS)
    return out


class TrialDataset():
    """
    Long-format stepped-wedge trial data.

    The dataset wraps an `~astropy.table.Table` with the columns
    ``cluster_id, individual_id, period, treatment, mediator, outcome``
    (missing cells masked), sorted by cluster, individual and period.
    It is treated as immutable once constructed; `table` returns a copy.

    Parameters
    ----------
    table : `~astropy.table.Table`
        Table with (at least) the six trial columns.
    n_periods : int, optional
        Number of trial periods T.  Defaults to the largest period present.
    """

    def __init__(self, table, n_periods=None):

        self._table = _normalize_table(table)

        self._cluster = np.asarray(self._table['cluster_id'], dtype=str)
        self._individual = np.asarray(self._table['individual_id'], dtype=str)
        self._period = np.asarray(self._table['period'], dtype=int)
        self._treatment = np.ma.asarray(self._table['treatment']).filled(-1).astype(int)
        self._mediator = np.ma.asarray(self._table['mediator']).astype(float).filled(np.nan)
        self._outcome = np.ma.asarray(self._table['outcome']).astype(float).filled(np.nan)

        max_period = int(self._period.max()) if len(self._period) else 0
        self.n_periods = int(n_periods) if n_periods is not None else max_period

        self._treatment_map = {}
        for cid, period, z in zip(self._cluster, self._period, self._treatment):
            if z >= 0:
                self._treatment_map.setdefault((cid, int(period)), int(z))

        self.clusters = self._describe_clusters()

    @classmethod
    def from_records(cls, records: Iterable[ObservationRecord], n_periods=None):
        """Build a dataset from `ObservationRecord` objects."""

        records = list(records)
        table = Table()
        table['cluster_id'] = [str(r.cluster_id) for r in records] if records else np.array([], dtype=str)
        table['individual_id'] = [str(r.individual_id) for r in records] if records else np.array([], dtype=str)
        table['period'] = np.array([r.period for r in records], dtype=int)
        for name, dtype in (('treatment', int), ('mediator', float), ('outcome', int)):
            values = [getattr(r, name) for r in records]
            mask = np.array([v is None for v in values], dtype=bool)
            table[name] = MaskedColumn(np.array([0 if v is None else v for v in values], dtype=dtype), mask=mask)
        return cls(table, n_periods=n_periods)

    def _describe_clusters(self):

        descriptors = []
        for cid in self.cluster_ids:
            in_cluster = self._cluster == cid
            cohort = len(np.unique(self._individual[in_cluster]))
            sequence = tuple(self._treatment_map.get((cid, t)) for t in range(1, self.n_periods + 1))
            descriptors.append(ClusterDescriptor(cluster_id=cid, cohort_size=cohort, treatment_sequence=sequence))
        return descriptors

    def __len__(self):
        return len(self._table)

    def __repr__(self):
        return (f"<TrialDataset: {len(self)} records, {len(self.cluster_ids)} clusters, "
                f"{len(self.individual_keys)} individuals, T={self.n_periods}>")

    @property
    def table(self):
        """A copy of the underlying table."""
        return self._table.copy()

    @property
    def records(self):
        """The records as a list of `ObservationRecord`."""

        out = []
        for k in range(len(self)):
            out.append(ObservationRecord(
                cluster_id=self._cluster[k], individual_id=self._individual[k], period=int(self._period[k]),
                treatment=None if self._treatment[k] < 0 else int(self._treatment[k]),
                mediator=None if np.isnan(self._mediator[k]) else float(self._mediator[k]),
                outcome=None if np.isnan(self._outcome[k]) else int(self._outcome[k])))
        return out

    @property
    def cluster_ids(self):
        """Cluster identifiers in sorted order."""
        return tuple(str(c) for c in np.unique(self._cluster))

    @property
    def individual_keys(self):
        """``(cluster_id, individual_id)`` pairs in sorted order."""

        if not len(self):
            return ()
        pairs = np.unique(np.stack([self._cluster, self._individual], axis=1), axis=0)
        return tuple((str(c), str(i)) for c, i in pairs)

    def treatment(self, cluster_id, period):
        """
        Cluster treatment indicator at ``period``; periods before 1 are control.
        Returns None if the cluster has no record for the period.
        """

        if period < 1:
            return 0
        return self._treatment_map.get((str(cluster_id), int(period)))

    def arrays(self):
        """
        Plain numpy views: cluster, individual, period, treatment (-1 missing),
        mediator (NaN missing), outcome (NaN missing).
        """
        return (self._cluster, self._individual, self._period, self._treatment, self._mediator, self._outcome)


@dataclass(frozen=True)
class Violation:
    """A single violated dataset invariant and where it occurs."""

    kind: str
    message: str
    cluster_id: Optional[str] = None
    individual_id: Optional[str] = None
    period: Optional[int] = None

    def __str__(self):
        where = [f"{name}={value}" for name, value in (("cluster", self.cluster_id),
                                                      ("individual", self.individual_id),
                                                      ("period", self.period)) if value is not None]
        return f"{self.kind}: {self.message}" + (f" ({', '.join(where)})" if where else "")


class ValidationReport():
    """
    The outcome of `validate`: every violated invariant with its location.

    The report is empty (``report.ok``) if and only if all invariants hold.
    """

    def __init__(self, violations: Sequence[Violation] = ()):
        self.violations = tuple(violations)

    @property
    def ok(self):
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __eq__(self, other):
        return isinstance(other, ValidationReport) and self.violations == other.violations

    def kinds(self):
        """The set of violated invariant kinds."""
        return {v.kind for v in self.violations}

    def by_kind(self, kind):
        return [v for v in self.violations if v.kind == kind]

    def to_table(self):
        table = Table(names=('kind', 'cluster_id', 'individual_id', 'period', 'message'),
                      dtype=(object, object, object, int, object))
        for v in self.violations:
            table.add_row((v.kind, v.cluster_id or "", v.individual_id or "", v.period or 0, v.message))
        return table

    def __str__(self, max_lines=20):
        if self.ok:
            return "dataset is valid"
        lines = [f"{len(self)} violation(s):"] + [f"  {v}" for v in self.violations[:max_lines]]
        if len(self) > max_lines:
            lines.append(f"  ... and {len(self) - max_lines} more")
        return "\n".join(lines)


def validate(data: TrialDataset) -> ValidationReport:
    """
    Check the stepped-wedge dataset invariants.

    Checked: period range, treatment present and binary, outcome binary,
    consistent cluster-level treatment, staggered rollout (treatment never
    switches off), simultaneous missingness of mediator and outcome,
    closed cohort (every individual has a baseline record and no gaps or
    duplicates in its periods) and monotone dropout.

    Parameters
    ----------
    data : `TrialDataset`

    Returns
    -------
    response : `ValidationReport`
        Empty iff the dataset is valid.
    """

    cluster, individual, period, treatment, mediator, outcome = data.arrays()
    violations = []

    for k in np.flatnonzero((period < 1) | (period > data.n_periods)):
        violations.append(Violation('period_range', f"period must lie in 1..{data.n_periods}",
                                    cluster[k], individual[k], int(period[k])))

    for k in np.flatnonzero(treatment < 0):
        violations.append(Violation('missing_treatment', "treatment is missing",
                                    cluster[k], individual[k], int(period[k])))
    for k in np.flatnonzero(treatment > 1):
        violations.append(Violation('treatment_value', "treatment must be 0 or 1",
                                    cluster[k], individual[k], int(period[k])))

    observed_y = ~np.isnan(outcome)
    for k in np.flatnonzero(observed_y & (outcome != 0) & (outcome != 1)):
        violations.append(Violation('outcome_value', "outcome must be 0 or 1",
                                    cluster[k], individual[k], int(period[k])))

    for k in np.flatnonzero(np.isnan(mediator) != np.isnan(outcome)):
        which = "outcome" if observed_y[k] else "mediator"
        violations.append(Violation('simultaneous_missingness', f"{which} is present while the other is missing",
                                    cluster[k], individual[k], int(period[k])))

    # Cluster-level treatment sequences
    for cid in data.cluster_ids:
        rows = (cluster == cid) & (treatment >= 0)
        previous = None
        for t in np.unique(period[rows]):
            values = np.unique(treatment[rows & (period == t)])
            if len(values) > 1:
                violations.append(Violation('inconsistent_treatment',
                                            "individuals in the cluster disagree on treatment", cid, None, int(t)))
            current = int(values.max())
            if previous is not None and current < previous:
                violations.append(Violation('staggered_rollout', "treatment switches off after being started",
                                            cid, None, int(t)))
            previous = current if previous is None else max(previous, current)

    # Individual histories (rows are sorted by cluster, individual, period)
    missing = np.isnan(mediator) & np.isnan(outcome)
    if len(cluster):
        change = np.flatnonzero((cluster[1:] != cluster[:-1]) | (individual[1:] != individual[:-1])) + 1
        bounds = np.concatenate([[0], change, [len(cluster)]])
    else:
        bounds = np.array([0])
    for start, stop in zip(bounds[:-1], bounds[1:]):
        cid, iid = cluster[start], individual[start]
        periods = period[start:stop]

        values, counts = np.unique(periods, return_counts=True)
        for t in values[counts > 1]:
            violations.append(Violation('duplicate_record', "more than one record for the period", cid, iid, int(t)))

        if values[0] != 1:
            violations.append(Violation('closed_cohort', "individual has no baseline (period 1) record",
                                        cid, iid, int(values[0])))
        for t in sorted(set(range(1, int(values[-1]) + 1)) - set(values.tolist())):
            violations.append(Violation('closed_cohort', "individual has no record for the period", cid, iid, t))

        dropped = np.flatnonzero(missing[start:stop])
        if len(dropped):
            first_missing = periods[dropped[0]]
            later = (periods > first_missing) & ~missing[start:stop]
            for t in periods[later]:
                violations.append(Violation('monotone_dropout',
                                            f"observed after being missing at period {int(first_missing)}",
                                            cid, iid, int(t)))

    return ValidationReport(violations)


def _read_error_line(message):
    found = re.search(r"data line (\d+)", message)
    return int(found.group(1)) + 2 if found else None


def _parse_binary(value, name, line):
    if value not in ("0", "1"):
        raise TrialDataError(f"{name} must be 0 or 1, got {value!r}", line=line)
    return int(value)


def load_csv(path, check=True) -> TrialDataset:
    """
    Read a trial dataset from CSV.

    The header must name the six columns ``cluster_id, individual_id, period,
    treatment, mediator, outcome`` (in any order).  Missing mediator/outcome
    values are empty fields.  Row order is not significant.

    Parameters
    ----------
    path : str or `~pathlib.Path`
        The CSV file.
    check : bool
        Validate the dataset and raise if any invariant is violated.

    Returns
    -------
    response : `TrialDataset`

    Raises
    ------
    TrialDataError
        Malformed rows (with line number) or, when ``check``, a failed
        validation (the report is attached as ``error.report``).
    """

    path = Path(path)
    if not path.is_file():
        raise TrialDataError(f"Data file not found: {path}")

    converters = {name: [ascii.convert_numpy(str)] for name in COLUMNS}
    try:
        raw = Table.read(path, format='ascii.csv', converters=converters, fast_reader=False)
    except ascii.InconsistentTableError as err:
        message = str(err).splitlines()[0]
        raise TrialDataError(message, line=_read_error_line(str(err)))
    except (ValueError, IndexError) as err:
        raise TrialDataError(f"Could not parse {path}: {err}")

    if sorted(raw.colnames) != sorted(COLUMNS):
        raise TrialDataError(f"Header must name the columns {','.join(COLUMNS)}, got {','.join(raw.colnames)}",
                             line=1)

    records = []
    masks = {name: np.ma.getmaskarray(np.ma.asarray(raw[name])) for name in COLUMNS}
    for k, row in enumerate(raw):
        line = k + 2
        for name in ('cluster_id', 'individual_id', 'period'):
            if masks[name][k]:
                raise TrialDataError(f"{name} may not be empty", line=line)
        try:
            period = int(row['period'])
        except ValueError:
            raise TrialDataError(f"period must be an integer, got {row['period']!r}", line=line)

        treatment = None if masks['treatment'][k] else _parse_binary(row['treatment'], 'treatment', line)
        outcome = None if masks['outcome'][k] else _parse_binary(row['outcome'], 'outcome', line)
        mediator = None
        if not masks['mediator'][k]:
            try:
                mediator = float(row['mediator'])
            except ValueError:
                raise TrialDataError(f"mediator must be a decimal number, got {row['mediator']!r}", line=line)
            if not np.isfinite(mediator):
                raise TrialDataError("mediator must be finite", line=line)

        records.append(ObservationRecord(str(row['cluster_id']), str(row['individual_id']), period,
                                         treatment, mediator, outcome))

    data = TrialDataset.from_records(records)
    if check:
        report = validate(data)
        if not report.ok:
            raise TrialDataError(f"{path} failed validation:\n{report}", report=report)
    return data


def _format_mediator(value):
    return "" if value is np.ma.masked else format_float(value)


def write_csv(data: TrialDataset, path):
    """
    Write a trial dataset as CSV (sorted rows, missing values as empty fields).

    Returns
    -------
    response : str
        The path written to.
    """

    table = data.table[list(COLUMNS)]
    table.write(str(path), format='ascii.csv', overwrite=True,
                formats={'mediator': _format_mediator},
                fill_values=[(ascii.masked, '')])
    return str(path)


class LaggedView():
    """
    Observed rows of a trial joined with the individual's previous period.

    Columns: ``cluster_id, individual_id, period, treatment, mediator,
    outcome`` (all present) plus ``lag_treatment`` (the cluster treatment at
    ``t - 1``, 0 at baseline), ``lag_mediator`` and ``lag_outcome`` (NaN when
    the previous period is unobserved or ``t = 1``).
    """

    def __init__(self, table):
        self.table = table

    def __len__(self):
        return len(self.table)

    def __repr__(self):
        return f"<LaggedView: {len(self)} rows>"

    def column(self, name):
        return np.asarray(self.table[name])

    @property
    def has_lag(self):
        return np.isfinite(self.column('lag_mediator'))

    def transition_rows(self):
        """
        Rows in the transition set: the cluster is under control at ``t - 1``,
        treated at ``t``, and the lagged mediator is observed.
        """

        keep = (self.column('lag_treatment') == 0) & (self.column('treatment') == 1) & self.has_lag
        return LaggedView(self.table[keep])

    def concatenate(self, other):
        """Rows of ``self`` followed by the rows of ``other``."""
        from astropy.table import vstack
        return LaggedView(vstack([self.table, other.table]))


def observed_rows(data: TrialDataset, require_lag=False, outcome_periods: Optional[Sequence[int]] = None):
    """
    Observed-data rows for analysis under monotone MAR dropout.

    Parameters
    ----------
    data : `TrialDataset`
        A validated dataset.
    require_lag : bool
        Keep only rows whose previous-period mediator is observed, restricted
        to the outcome periods.
    outcome_periods : sequence of int, optional
        Periods with an outcome model, used when ``require_lag``.
        Defaults to ``2..T``.

    Returns
    -------
    response : `LaggedView`
    """

    cluster, individual, period, treatment, mediator, outcome = data.arrays()
    n_rows = len(cluster)

    same = np.zeros(n_rows, dtype=bool)
    if n_rows > 1:
        same[1:] = (cluster[1:] == cluster[:-1]) & (individual[1:] == individual[:-1]) & (period[1:] == period[:-1] + 1)
    previous = np.maximum(np.arange(n_rows) - 1, 0)

    lag_mediator = np.where(same, mediator[previous], np.nan)
    lag_outcome = np.where(same, outcome[previous], np.nan)
    lag_treatment = np.array([data.treatment(c, t - 1) for c, t in zip(cluster, period)], dtype=float)
    lag_treatment = np.where(np.isnan(lag_treatment), -1, lag_treatment).astype(int)

    keep = ~np.isnan(mediator) & ~np.isnan(outcome) & (treatment >= 0)
    if require_lag:
        if outcome_periods is None:
            outcome_periods = range(2, data.n_periods + 1)
        keep &= np.isfinite(lag_mediator) & np.isin(period, list(outcome_periods))

    table = Table()
    table['cluster_id'] = Column(cluster[keep])
    table['individual_id'] = Column(individual[keep])
    table['period'] = Column(period[keep])
    table['treatment'] = Column(treatment[keep])
    table['mediator'] = Column(mediator[keep])
    table['outcome'] = Column(outcome[keep].astype(int))
    table['lag_treatment'] = Column(lag_treatment[keep])
    table['lag_mediator'] = Column(lag_mediator[keep])
    table['lag_outcome'] = Column(lag_outcome[keep])

    if not len(table):
        warnings.warn("No observed rows remain in the lagged view.", DataWarning)
    return LaggedView(table)


def arm_contrasts(data: TrialDataset):
    """
    Descriptive outcome contrasts by period.

    For each period ``t >= 2``: the observed outcome rate in treated clusters
    minus the rate in control clusters, and the treatment-initiation contrast
    (clusters first treated at ``t`` against clusters still under control).

    Returns
    -------
    response : `~astropy.table.Table`
        One row per period; rates are NaN when a group is empty.
    """

    view = observed_rows(data)
    start = {c.cluster_id: c.start_period for c in data.clusters}

    period = view.column('period')
    treated = view.column('treatment') == 1
    outcome = view.column('outcome').astype(float)
    initiating = np.array([start[c] == t for c, t in zip(view.column('cluster_id'), period)], dtype=bool)

    def rate(mask):
        return float(outcome[mask].mean()) if mask.any() else np.nan

    table = Table(names=('period', 'n_treated', 'n_control', 'n_initiating', 'treated_rate',
                         'control_rate', 'difference', 'initiation_rate', 'initiation_difference'),
                  dtype=(int, int, int, int, float, float, float, float, float))
    for t in range(2, data.n_periods + 1):
        at_t = period == t
        treated_rate, control_rate = rate(at_t & treated), rate(at_t & ~treated)
        initiation_rate = rate(at_t & initiating)
        table.add_row((t, int((at_t & treated).sum()), int((at_t & ~treated).sum()), int((at_t & initiating).sum()),
                       treated_rate, control_rate, treated_rate - control_rate,
                       initiation_rate, initiation_rate - control_rate))
    return table
