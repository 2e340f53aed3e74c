"""Exception hierarchy.

Each class maps onto one CLI exit code (see ``merf_sae.cli.EXIT_CODES``).
"""


class MerfError(Exception):
    """Base class for all package errors."""


class SchemaError(MerfError):
    """Missing or malformed columns in an input table."""


class ParseError(MerfError):
    """Values that cannot be parsed (non-numeric response, missing cells)."""


class EmptyInputError(SchemaError):
    """Input file or array without data rows."""


class ConsistencyError(MerfError):
    """Survey, census, model or pattern disagree about areas or columns."""


class ConfigError(MerfError):
    """Invalid configuration or degenerate input that needs user action."""


class FitError(MerfError):
    """A model fit failed numerically."""
