"""Exception hierarchy shared by the pipeline stages.

Each class carries the process exit code the CLI maps it to.
"""


class ViewAggError(Exception):
    exit_code = 1


class DataError(ViewAggError):
    """Malformed input files, inconsistent shapes, unusable datasets."""

    exit_code = 3


class CalibrationError(DataError):
    """Candidate generation cannot reach the requested sensitivity."""


class ConvergenceError(ViewAggError):
    exit_code = 4
