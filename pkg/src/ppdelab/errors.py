class NumericalError(RuntimeError):
    """A computation produced non-finite or otherwise unusable numbers."""


class SimulationError(NumericalError):
    pass


class RegressionError(NumericalError):
    pass


class NonContractionError(NumericalError):
    """Picard iterates stopped contracting inside a window."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TreeSizeError(ValueError):
    pass
