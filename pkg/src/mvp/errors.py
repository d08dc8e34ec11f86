"""Exception hierarchy shared by every module.

Each error carries a short ``category`` string and the process exit code the
CLI maps it to.
"""


class MVPError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(MVPError, ValueError):
    category = "config"
    exit_code = 2


class ValidationError(ConfigError):
    """Input data violates a documented precondition."""

    category = "validation"


class DimensionError(ValidationError):
    category = "dimension"


class SchemaError(ValidationError):
    category = "schema"


class ParseError(ValidationError):
    category = "parse"


class DesignError(ValidationError):
    category = "design"


class IOFailure(MVPError, OSError):
    category = "io"
    exit_code = 3


class NumericError(MVPError, ArithmeticError):
    category = "numeric"
    exit_code = 4
