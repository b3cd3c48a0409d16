"""Exception hierarchy shared by every module."""


class PBadvError(Exception):
    """Base class for all engine errors."""


class ShapeError(PBadvError):
    def __init__(self, kind, message):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


class ContractError(PBadvError):
    """A precondition of an operation was violated."""


class DegenerateInputError(ContractError):
    """Input is valid in shape but numerically degenerate (e.g. zero norm)."""


class NumericError(PBadvError):
    """A NaN or Inf showed up where only finite values are allowed."""


class DataError(PBadvError):
    """A data file is malformed or violates dataset invariants."""


class ConfigError(PBadvError):
    """Invalid configuration key or value."""
