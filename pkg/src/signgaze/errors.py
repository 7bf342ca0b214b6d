"""Shared exception types.

Every module raises from this taxonomy so callers (and the CLI) can map
failures to exit codes without string matching.
"""


class SignGazeError(Exception):
    """Base class for all library errors."""


class AllMasked(SignGazeError):
    """Every candidate region is masked; the scan-path must terminate."""


class ExplosionGuard(SignGazeError):
    """Exact enumeration would exceed the configured path-count cap."""


class DimensionMismatch(SignGazeError):
    """Vector/grid dimensions disagree."""


class UnsupportedFormat(SignGazeError):
    """Image file is not a supported netpbm variant."""


class CorruptHeader(SignGazeError):
    """Netpbm header could not be parsed."""


class TruncatedData(SignGazeError):
    """Declared raster size exceeds the data actually present."""


class IndivisibleDims(SignGazeError):
    """Image dimensions are not divisible by the patch size."""


class ShapeMismatch(SignGazeError):
    """Tensor operands have incompatible shapes."""


class NonScalarRoot(SignGazeError):
    """Backward pass was started from a non-scalar node."""


class ConfigMismatch(SignGazeError):
    """Parameters were built for a different model configuration."""


class EmptyBatch(SignGazeError):
    """An operation over a batch received no elements."""


class EmptyEnsemble(SignGazeError):
    """Prediction requested from an empty model ensemble."""


class TooFewRecords(SignGazeError):
    """Not enough records to build the requested split."""


class ConstantTargets(SignGazeError):
    """Correlation is undefined because the target vector is constant."""


class ConstantVector(SignGazeError):
    """Correlation is undefined because an input vector is constant."""
