"""Exception taxonomy for the pipeline.

Every error raised by this package derives from ProtogateError so callers
(and the CLI) can map failures to a stable machine-readable category.
"""


class ProtogateError(Exception):
    """Base class for all pipeline errors."""

    category = "pipeline-error"


class DimensionError(ProtogateError):
    """Operand shapes are incompatible."""

    category = "dimension-error"


class FormatError(ProtogateError):
    """A file does not match its declared binary format (magic/version)."""

    category = "format-error"


class TruncationError(ProtogateError):
    """A file's payload length disagrees with its header."""

    category = "truncation-error"


class DataError(ProtogateError):
    """Payload values violate data invariants (NaN/Inf where finite required)."""

    category = "data-error"


class ValidationError(ProtogateError):
    """An in-memory object violates its invariants."""

    category = "validation-error"


class InfeasibleError(ProtogateError):
    """The requested operation cannot be satisfied by the given data
    (e.g. fewer samples than clusters)."""

    category = "infeasible-error"


class ConsistencyError(ProtogateError):
    """Two artifacts that must describe the same data disagree
    (e.g. a selection report applied to the wrong pool)."""

    category = "consistency-error"


class UndefinedSimilarityError(ProtogateError):
    """Cosine similarity requested against a zero-norm vector."""

    category = "undefined-similarity"


class PoisonedGradientError(ProtogateError):
    """A loss or gradient came back non-finite; training must abort."""

    category = "poisoned-gradient"


class DivergenceError(ProtogateError):
    """Training loss exploded past the divergence guard.

    Carries the training log accumulated up to the failing epoch.
    """

    category = "divergence-error"

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
