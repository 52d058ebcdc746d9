"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract (shapes, ranges)."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class FormatError(ValueError):
    """A checkpoint or dataset file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A model or training configuration is invalid."""


class DegenerateBatchError(ValueError):
    """The sample matrix of a batch has zero total weight, so the sampled loss is undefined."""
