"""Exception hierarchy shared by the kernels and the workbench CLI."""


class WorkbenchError(Exception):
    """Base class for every failure the workbench reports to the user."""

    exit_code = 1


class ConfigError(WorkbenchError):
    """Invalid or incomplete run configuration."""

    exit_code = 2


class MissingFrequencyData(ConfigError):
    """Observed data is missing for a scheduled frequency."""


class NumericalFailure(WorkbenchError):
    """A solve failed or produced non-finite values."""

    exit_code = 3


class GridError(ValueError):
    """Field shapes or grid sizes violate an operator's requirements."""
