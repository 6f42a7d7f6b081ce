"""Exception hierarchy shared by every module."""


class RotPruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RotPruneError, ValueError):
    pass


class NotOrthogonalError(ShapeError):
    pass


class NumericalError(RotPruneError, ArithmeticError):
    """A computation produced or met a value it cannot work with."""


class RankDeficientError(NumericalError):
    def __init__(self, column, pivot, threshold):
        self.column = column
        self.pivot = pivot
        self.threshold = threshold
        super().__init__(
            f"matrix is rank deficient at column {column}: "
            f"|r[{column},{column}]| = {pivot:.3e} < {threshold:.3e}"
        )


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, index, damp):
        self.index = index
        self.damp = damp
        super().__init__(
            f"matrix is not positive definite after dampening (pivot {index}, "
            f"damp={damp:g}); retry with a larger damp"
        )


class NonFiniteError(NumericalError):
    pass


class ConfigError(RotPruneError, ValueError):
    pass


class StageError(RotPruneError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, layer, cause):
        self.stage = stage
        self.layer = layer
        self.cause = cause
        where = f"stage '{stage}'" + (f", layer {layer}" if layer is not None else "")
        super().__init__(f"{where}: {cause}")
