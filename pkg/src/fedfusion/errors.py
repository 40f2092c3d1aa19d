"""Exception hierarchy shared across the package.

Exit-code mapping lives in the CLI: usage errors are 1, data/validation
errors (FormatError, TruncationError, ValidationError, DegenerateInputError)
are 2, numerical failures (SingularCovarianceError) are 3.
"""


class FedFusionError(Exception):
    """Base class for all package errors."""


class FormatError(FedFusionError):
    """Bad magic, version, or header in a binary file."""


class TruncationError(FedFusionError):
    """Declared payload size does not match the bytes on disk."""


class ValidationError(FedFusionError):
    """Structurally well-formed input violating a semantic invariant."""


class DegenerateInputError(FedFusionError):
    """Input on which the requested operation is mathematically undefined."""


class SingularCovarianceError(FedFusionError):
    """Covariance factorization failed even after ridge regularization."""

    def __init__(self, message: str, smallest_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {smallest_eigenvalue:.3e})")
        self.smallest_eigenvalue = smallest_eigenvalue
