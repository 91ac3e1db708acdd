# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Command-line interface: ``wedgepce <command>`` runs one step of the
analysis and keeps every artifact in a workspace directory.

Exit codes: 0 success, 2 configuration, data or missing-artifact errors,
3 sampler quality failure, 4 infeasible calibration.
"""

import argparse
import logging
import sys
from pathlib import Path

from astropy import log
from astropy.table import Table

from . import __version__
from .calibration import SensitivityConfig, calibrate
from .config import load_config
from .exceptions import (ArtifactError, CalibrationError, ConfigError, ParameterError, SamplerQualityError,
                         TrialDataError)
from .pce import PceEstimate, delta_sweep, pce_posterior
from .sampler import PosteriorDraws, check_divergences, diagnostics, fit
from .simulator import simulate_trial
from .trial_data import arm_contrasts, load_csv, validate, write_csv
from .utils.utils import file_digest, read_json, write_json

__all__ = ['main', 'cmd_simulate', 'cmd_fit', 'cmd_calibrate', 'cmd_pce', 'cmd_report']

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SAMPLER = 3
EXIT_CALIBRATION = 4

DRAWS_FILE = "draws.csv"
CALIBRATION_FILE = "calibration.json"


def _debug():
    return log.getEffectiveLevel() <= logging.DEBUG


def _workspace(cfg):
    workspace = cfg.workspace
    workspace.mkdir(parents=True, exist_ok=True)
    return workspace


def _require(path, artifact):
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Missing {artifact}: {path}")
    return path


def _load_data(cfg):
    path = _require(cfg.data_path, "dataset")
    return load_csv(path), file_digest(path)


def cmd_simulate(cfg, args=None):
    """Simulate a trial; writes the dataset CSV and ``truth.json``."""

    seed = cfg.require_seed('simulate')
    workspace = _workspace(cfg)
    design, truth = cfg.design(), cfg.truth()
    data = simulate_trial(design, truth, seed, mediator_lag=cfg.mediator_lag, verbose=_debug())

    report = validate(data)
    if not report.ok:
        raise TrialDataError("Simulated dataset failed validation", report=report)

    data_path = cfg.data_path
    data_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, data_path)
    write_json({"seed": seed, "design": design.to_dict(), "truth": truth.to_dict(),
                "mediator_lag": cfg.mediator_lag, "data_sha256": file_digest(data_path), "config": cfg.to_dict()},
               workspace / "truth.json")
    log.info(f"Wrote {len(data.table)} rows to {data_path}")
    return EXIT_OK


def cmd_fit(cfg, args=None):
    """Fit the observed-data model; writes the draws and ``diagnostics.csv``."""

    cfg.require_seed('fit')
    workspace = _workspace(cfg)
    data, digest = _load_data(cfg)

    sampler_cfg = cfg.sampler()
    draws = fit(data, hp=cfg.hyperpriors(), cfg=sampler_cfg, outcome_periods=cfg.outcome_periods(data.n_periods),
                mediator_lag=cfg.mediator_lag, path=workspace / DRAWS_FILE,
                metadata={"data_sha256": digest, "config": cfg.to_dict()}, verbose=_debug())

    diag = diagnostics(draws, max_divergence_rate=sampler_cfg.max_divergence_rate)
    table = diag.to_table()
    table.write(workspace / "diagnostics.csv", format='ascii.csv', overwrite=True,
                formats={name: '%.6g' for name in table.colnames if table[name].dtype.kind == 'f'})
    for line in table.pformat(max_lines=-1, max_width=-1):
        log.info(line)

    check_divergences(draws, sampler_cfg.max_divergence_rate)
    return EXIT_OK


def cmd_calibrate(cfg, args=None):
    """Calibrate the sensitivity parameters; writes ``calibration.json``."""

    cfg.require_seed('calibrate')
    workspace = _workspace(cfg)
    data, digest = _load_data(cfg)
    draws = PosteriorDraws.read(workspace / DRAWS_FILE)

    c = cfg['calibration']
    bounds = calibrate(data, draws, per_period=c['per_period_rho'], per_draw=c['per_draw_lambda'])
    sensitivity = cfg.sensitivity(bounds)
    out = sensitivity.to_dict()
    out.update({"data_sha256": digest, "config": cfg.to_dict()})
    write_json(out, workspace / CALIBRATION_FILE)
    log.info(f"rho grid: {', '.join(f'{r:g}' for r in sensitivity.rho_grid)}")
    return EXIT_OK


def cmd_pce(cfg, args=None):
    """Principal causal effects over the calibrated grid; writes ``pce*.csv/json``."""

    cfg.require_seed('pce')
    workspace = _workspace(cfg)
    draws = PosteriorDraws.read(workspace / DRAWS_FILE)
    sensitivity = SensitivityConfig.from_dict(read_json(workspace / CALIBRATION_FILE, artifact="calibration"))

    exact = True if getattr(args, 'exact_delta', False) else None
    query = cfg.pce_query(exact_delta=exact)
    verbose = _debug()

    if getattr(args, 'delta_sweep', False):
        estimate = delta_sweep(draws, sensitivity, query, deltas=tuple(cfg['pce']['delta_values']),
                               threads=cfg.threads, verbose=verbose)
        estimate.write(workspace, prefix="pce_delta")
    else:
        estimate = pce_posterior(draws, sensitivity, query, threads=cfg.threads, verbose=verbose)
        estimate.write(workspace)
    log.info(f"{len(estimate)} draw-level PCE values, {len(estimate.failures)} skipped")
    return EXIT_OK


def _format_table(table, digits=4):
    table = Table(table, copy=True)
    for name in table.colnames:
        if table[name].dtype.kind == 'f':
            table[name].info.format = f'.{digits}f'
    return table.pformat(max_lines=-1, max_width=-1)


def render_report(workspace, data_path=None):
    """
    Text summary of a workspace: PCE credible intervals by period, interval
    and correlation, the calibration, sampler diagnostics and the descriptive
    arm contrasts of the dataset at ``data_path`` (default
    ``<workspace>/data.csv``).
    """

    workspace = Path(workspace)
    data_path = workspace / "data.csv" if data_path is None else Path(data_path)
    draws = PosteriorDraws.read(workspace / DRAWS_FILE)
    calibration = read_json(workspace / CALIBRATION_FILE, artifact="calibration")
    _require(workspace / "pce.csv", "PCE table")
    estimate = PceEstimate.read(workspace)

    lines = ["Principal causal effects (posterior mean, 95% credible interval)", ""]
    lines += _format_table(estimate.summary())
    for interval in estimate.intervals:
        lines.append(f"  {interval.label}: M(1) - M(0) in ({interval.lower:g}, {interval.upper:g})")
    if estimate.failures:
        lines.append(f"  {len(estimate.failures)} draw-level tasks skipped")

    bounds = calibration.get("bounds") or {}
    lines += ["", "Calibration", ""]
    lines.append(f"  rho*: {bounds.get('rho_star')}  (transition pairs: {bounds.get('n_transition')})")
    lines.append(f"  rho grid: {', '.join(f'{r:g}' for r in calibration['rho_grid'])}")
    lines.append(f"  lambda rule: {calibration['rule']}")
    for arm in ("lambda0", "lambda1"):
        if arm in bounds:
            b = bounds[arm]
            fallback = f"  fallback: {b['fallback']}" if b.get('fallback') else ""
            lines.append(f"  {arm} in [{b['lower']:.4f}, {b['upper']:.4f}]{fallback}")

    lines += ["", f"Sampler: {draws.n_chains} chains, {draws.n_draws} draws, {draws.divergences} divergent", ""]
    diag_path = workspace / "diagnostics.csv"
    if diag_path.is_file():
        lines += _format_table(Table.read(diag_path, format='ascii.csv'), digits=3)

    if data_path.is_file():
        lines += ["", "Observed arm contrasts", ""]
        lines += _format_table(arm_contrasts(load_csv(data_path, check=False)))
    return "\n".join(lines) + "\n"


def cmd_report(cfg, args=None):
    """Render the workspace summary to ``report.txt`` and standard output."""

    workspace = cfg.workspace
    text = render_report(workspace, cfg.data_path)
    with open(workspace / "report.txt", "w", encoding="utf-8") as fle:
        fle.write(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "pce": cmd_pce,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="wedgepce",
                                     description="Principal causal effects for stepped-wedge cluster randomized "
                                                 "trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, help="root random seed")
    parser.add_argument("--workspace", help="directory holding all artifacts")
    parser.add_argument("--threads", help="worker threads, an integer or 'auto'")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="simulate a trial dataset")
    sub.add_parser("fit", help="sample the observed-data posterior")
    sub.add_parser("calibrate", help="calibrate the sensitivity parameters")
    pce = sub.add_parser("pce", help="compute principal causal effects")
    pce.add_argument("--delta-sweep", action="store_true", help="evaluate the default strata over a range of cutoffs")
    pce.add_argument("--exact-delta", action="store_true", help="solve the stratum intercept at every sample")
    sub.add_parser("report", help="summarize the workspace")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    log.setLevel('DEBUG' if args.verbose else 'WARNING' if args.quiet else 'INFO')

    try:
        cfg = load_config(args.config, overrides=args.overrides, seed=args.seed, workspace=args.workspace,
                          threads=args.threads)
        return COMMANDS[args.command](cfg, args)
    except TrialDataError as err:
        log.error(str(err))
        if err.report is not None:
            log.error(str(err.report))
        return EXIT_INPUT
    except (ConfigError, ParameterError, ArtifactError) as err:
        log.error(str(err))
        return EXIT_INPUT
    except SamplerQualityError as err:
        log.error(str(err))
        return EXIT_SAMPLER
    except CalibrationError as err:
        log.error(str(err))
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
