"""Exception hierarchy shared by every vik module.

Each error class carries the process exit code the CLI reports for it, so the
mapping from failure kind to exit status lives in one place.
"""


class VikError(Exception):
    exit_code = 1

    def __init__(self, message: str, *, module: str | None = None):
        self.module = module
        super().__init__(f"[{module}] {message}" if module else message)


class CheckFailure(VikError):
    """A verification (gradient check, acceptance run) did not pass."""

    exit_code = 1


class ConfigError(VikError):
    exit_code = 2


class DataError(VikError):
    exit_code = 3


class NumericalError(VikError):
    exit_code = 4


# --- refinements ---


class DimensionError(ConfigError):
    """Operand extents disagree."""


class ShapeError(DimensionError):
    """A spatial extent is not compatible with a patch, stride or token count."""


class ParameterError(ConfigError):
    """A parameter lies outside its valid domain (non-positive width, scale...)."""


class UsageError(ConfigError):
    """An API was driven out of order, e.g. a tape consumed twice."""


class FormatError(DataError):
    """A file does not follow its binary layout."""
