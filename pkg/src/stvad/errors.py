"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed, inconsistent, or non-finite data (files or in-memory)."""


class TrainingError(RuntimeError):
    """Training cannot proceed (degenerate dataset, non-finite loss)."""
