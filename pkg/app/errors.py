"""Exception hierarchy shared by the library and the command line.

Each error that can reach the CLI carries the process exit code it maps to.
"""


class PRTMError(Exception):
    """Base class for failures the command line reports with a dedicated exit code."""

    exit_code = 1


class ConfigError(PRTMError):
    exit_code = 6


class CohortError(PRTMError):
    """Missing or malformed cohort directory."""

    exit_code = 3


class WeightsError(PRTMError):
    """Missing, corrupt or incompatible model weights."""

    exit_code = 4


class UnknownPatientError(PRTMError, KeyError):
    exit_code = 5

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown patient"


class SchemaError(ValueError):
    """A numeric schema cannot be fitted or applied."""


class ShapeError(ValueError):
    """Operand shapes or dimensions do not line up."""


class MaskError(ValueError):
    """An attention mask leaves a query with no key to attend to."""


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or infinity."""
