# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Custom exceptions used in the wedgepce modules
"""

from astropy.utils.exceptions import AstropyWarning


class InvalidInputError(Exception):
    """
    Exception to be issued when user input is incorrect in a
    way that prevents the function from running.
    """
    pass


class TrialDataError(InvalidInputError):
    """
    Errors related to malformed or invalid trial datasets.

    Parameters
    ----------
    message : str
        Description of the problem.
    line : int, optional
        1-based line number in the source file, when the error comes from parsing.
    report : `~wedgepce.trial_data.ValidationReport`, optional
        The validation report listing every violated invariant.
    """

    def __init__(self, message, line=None, report=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.report = report


class ParameterError(InvalidInputError):
    """
    Errors related to invalid model, truth or design parameters.
    """
    pass


class ConfigError(InvalidInputError):
    """
    Errors related to missing or invalid run configuration fields.
    """
    pass


class ArtifactError(InvalidInputError):
    """
    A workspace artifact needed by a command is missing or unreadable.
    """
    pass


class CalibrationError(InvalidInputError):
    """
    Errors raised when the sensitivity parameters cannot be calibrated.
    """
    pass


class SeparationError(CalibrationError):
    """
    Complete or quasi-complete separation in an auxiliary logistic regression.
    """
    pass


class RankError(CalibrationError):
    """
    Singular design matrix in an auxiliary logistic regression.
    """
    pass


class NumericError(ArithmeticError):
    """
    Non-finite values or domain violations inside the numerical kernel.
    """
    pass


class DomainError(NumericError, ValueError):
    """
    A function was evaluated outside of its domain (e.g. ``logit(0)``).
    """
    pass


class NonConvergenceError(NumericError):
    """
    An iterative solver failed to reach its tolerance.

    Parameters
    ----------
    message : str
        Description of the failure.
    last_iterate : float or array
        The last iterate reached by the solver.
    residual : float or array
        The residual at ``last_iterate``.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class DegenerateStratumError(NumericError):
    """
    A principal stratum has (numerically) zero probability.
    """

    def __init__(self, message, probability=None, context=None):
        if context:
            message = "{} ({})".format(message, ", ".join(f"{k}={v}" for k, v in context.items()))
        super().__init__(message)
        self.probability = probability
        self.context = context or {}


class InitializationError(RuntimeError):
    """
    The sampler could not find a starting point with finite log density.
    """
    pass


class SamplerQualityError(RuntimeError):
    """
    Sampler output failed the quality thresholds (e.g. too many divergences).
    """
    pass


class PceError(RuntimeError):
    """
    Too many draw-level PCE computations failed.
    """
    pass


class InputWarning(AstropyWarning):
    """
    Warning to be issued when user input is incorrect in
    some way but doesn't prevent the function from running.
    """
    pass


class DataWarning(AstropyWarning):
    """
    Warnings to do with data content.
    """
    pass


class SamplerWarning(AstropyWarning):
    """
    Warnings to do with sampler behavior and convergence diagnostics.
    """
    pass
