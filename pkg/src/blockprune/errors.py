"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI maps to
an exit status and prints in its JSON error line.
"""


class BlockPruneError(Exception):
    code = "error"
    exit_status = 1


class ShapeError(BlockPruneError, ValueError):
    code = "dimension"
    exit_status = 3


class ConfigError(BlockPruneError, ValueError):
    code = "config"
    exit_status = 3

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TokenIdError(BlockPruneError, IndexError):
    code = "token_id"
    exit_status = 4


class DataError(BlockPruneError, ValueError):
    code = "data"
    exit_status = 4


class FormatError(BlockPruneError, ValueError):
    code = "format"
    exit_status = 5


class InfeasibleError(BlockPruneError, ValueError):
    code = "infeasible"
    exit_status = 6


class CapacityError(BlockPruneError, RuntimeError):
    """Sequence or KV-cache length exceeds what was allocated."""

    code = "capacity"
    exit_status = 7


class NumericError(BlockPruneError, FloatingPointError):
    code = "numeric"
    exit_status = 8


class ContractError(BlockPruneError, RuntimeError):
    code = "contract"
    exit_status = 9
