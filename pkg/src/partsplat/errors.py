"""Exception types shared across the package."""


class PartsplatError(Exception):
    """Base class for all package errors."""


class ConfigError(PartsplatError):
    """Invalid or inconsistent configuration."""


class ContractViolation(PartsplatError):
    """An operation was called with inputs that break its contract."""


class DataError(PartsplatError):
    """Malformed dataset, image, or artifact file."""


class PlyParseError(DataError):
    """Malformed PLY file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateFieldError(PartsplatError):
    """Deformation field has no usable motion signal (all displacements equal)."""


class DegenerateMaskError(PartsplatError):
    """Movable mask is too small to optimize motion parameters."""


class DegenerateRotationError(PartsplatError):
    """Quaternion update collapsed to (near) zero norm."""


class DivergenceError(PartsplatError):
    """Optimization diverged or produced non-finite values."""
