"""Exception types shared across the package."""


class EpiconError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgument(EpiconError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ShapeMismatch(EpiconError, ValueError):
    """Array shapes are inconsistent with the declared contract."""


class DataError(EpiconError, ValueError):
    """Dataset ingestion failed (bad layout, overlapping splits, bad file)."""


class InsufficientData(EpiconError, ValueError):
    """A split lacks the classes or per-class samples an episode needs."""


class ZeroVectorError(EpiconError, ValueError):
    """Cosine similarity was requested for an all-zero vector."""


class DivergenceError(EpiconError, RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(EpiconError, ValueError):
    """A checkpoint file is malformed or does not match the expected config."""
