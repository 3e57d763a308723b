"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


class NumericError(ArithmeticError):
    """Raised on NaN/inf inputs or results."""


class ConvergenceError(RuntimeError):
    def __init__(self, sweeps, message=None):
        self.sweeps = sweeps
        super().__init__(message or f"Jacobi SVD did not converge after {sweeps} sweeps")


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training; ``last_good_epoch`` is -1 if none completed."""

    def __init__(self, epoch, last_good_epoch, detail=""):
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch
        msg = f"training diverged at epoch {epoch} (last good epoch: {last_good_epoch})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DataFormatError(ValueError):
    """Malformed input file; carries the byte offset where parsing failed."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{path}: {reason} (byte offset {offset})")
