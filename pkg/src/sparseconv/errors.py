"""Exception hierarchy shared across the package."""


class SparseConvError(Exception):
    """Base class for all package errors."""


class ShapeError(SparseConvError):
    """Inconsistent or invalid tensor / layer geometry."""


class FormatError(SparseConvError):
    """Corrupt or invalid serialized structure (CSR arrays, model files)."""


class IntegrityError(SparseConvError):
    """A cross-check between two compute paths failed."""


class TrainingError(SparseConvError):
    """Training diverged (NaN loss or similar)."""
