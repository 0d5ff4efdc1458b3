"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to, so callers
deep in the stack can raise without knowing about the command line.
"""


class CtrLoraError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(CtrLoraError, ValueError):
    exit_code = 2
    category = "config"


class InvalidRangeError(ConfigError):
    category = "invalid-range"


class ShapeError(ConfigError):
    category = "shape"


class DataError(CtrLoraError):
    exit_code = 3
    category = "data"


class InsufficientDataError(DataError):
    category = "insufficient-data"


class DivergenceError(CtrLoraError, FloatingPointError):
    exit_code = 4
    category = "divergence"


class NonConvergenceError(DivergenceError):
    category = "non-convergence"


class CompatibilityError(CtrLoraError):
    exit_code = 5
    category = "compatibility"


class FrozenViolationError(CompatibilityError):
    category = "frozen-violation"
