"""Exception types shared across the package."""


class GeocorrError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GeocorrError):
    """Raised when operand shapes are incompatible for an op.

    The message always names the op and every operand shape involved so the
    failure is diagnosable without a debugger.
    """

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AutodiffError(GeocorrError):
    """Backward-pass misuse: non-scalar loss, empty tape, and friends."""


class OptimizerError(GeocorrError):
    """Non-finite gradients or bad optimizer configuration."""


class ConfigError(GeocorrError):
    """Invalid or inconsistent configuration values."""


class DataError(GeocorrError):
    """Malformed inputs: empty masks, bad files, degenerate samples."""


class GeometryError(GeocorrError):
    """Degenerate geometric configuration (rank-deficient, collinear, ...)."""


class NumericsError(GeocorrError):
    """Non-finite values where finite ones are required (diverged state)."""
