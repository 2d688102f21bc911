"""Exception taxonomy, aligned with the CLI exit-code categories."""


class ValidationError(ValueError):
    """Bad arguments, shapes, or configuration. CLI exit code 1."""


class NumericError(ArithmeticError):
    """Runtime numeric failure (divergence, non-finite values). CLI exit code 2."""


class TensorFormatError(Exception):
    """Malformed or unsupported on-disk tensor/image data. CLI exit code 3."""


class DivergenceError(NumericError):
    """Optimization produced a non-finite loss.

    Carries enough context to resume a post-mortem: the iteration index and,
    when the driver managed to write one, a phase snapshot path.
    """

    def __init__(self, message: str, iteration: int, snapshot_path: str | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot_path = snapshot_path
