"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class MissingParameterError(KeyError):
    pass


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed.

    ``op`` names the operation (or loss term / training phase) at fault when known.
    """

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class CheckpointFormatError(ValueError):
    pass


class InsufficientDataError(RuntimeError):
    pass
