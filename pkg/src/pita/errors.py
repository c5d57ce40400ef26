"""Exception types shared across the package."""


class PitaError(Exception):
    """Base class for all package-specific errors."""


class ParseError(PitaError):
    """Malformed input file. Carries the offending path and line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{where} {message}".strip())


class EmptyRecipe(PitaError):
    """Recipe has no ingredient items."""


class DuplicateIngredient(PitaError):
    """Same ingredient index listed twice in one recipe."""


class VocabularyMismatch(PitaError):
    """Ingredient index outside the vocabulary index space."""


class DimensionMismatch(PitaError):
    """Vector or matrix dimensions do not agree."""


class ZeroNormEmbedding(PitaError):
    """Zero-norm embedding row used in a cosine computation."""


class ZeroNormCentroid(PitaError):
    """Group centroid has zero norm."""


class InvalidVerdict(PitaError):
    """Curation verdict is malformed (self-pair, unknown label, ...)."""


class NumericalBlowup(PitaError):
    """Scaling overflow or NaN in an iterative solver."""


class EmptyDistribution(PitaError):
    """Transport marginal carries no mass."""


class BatchTooSmall(PitaError):
    """Mini-batch too small for in-batch negative mining."""


class EmptyDataset(PitaError):
    """Training or evaluation split has no records."""


class InvalidK(PitaError):
    """Top-k count exceeds the vocabulary size."""


class UndefinedMetric(PitaError):
    """Metric denominator is zero (empty ground truth)."""


class MissingCheckpoint(PitaError):
    """A required earlier-stage checkpoint does not exist."""


class ConfigError(PitaError):
    """Unknown or ill-typed run-configuration key."""
