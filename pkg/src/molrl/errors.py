"""Exception types shared across the package."""


class MolrlError(Exception):
    """Base class for all package errors."""


class GeometryError(MolrlError):
    """Non-finite or otherwise unusable coordinates."""


class VocabError(MolrlError):
    """Element symbol outside the atom vocabulary."""


class XyzParseError(MolrlError):
    """Malformed XYZ record; message carries file and line."""

    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class ConfigError(MolrlError):
    """Invalid run configuration or out-of-range builder argument."""


class OrderingError(MolrlError):
    """Timestep pair violates s < t."""


class ShapeError(MolrlError):
    """Tensor or parameter shape mismatch."""


class NumericError(MolrlError):
    """Non-finite value produced where a finite one is required."""


class DomainError(MolrlError):
    """Parameter outside the mathematical domain (e.g. NIG alpha <= 1)."""


class DegenerateDataError(MolrlError):
    """Constant column / zero variance where a spread is required."""
