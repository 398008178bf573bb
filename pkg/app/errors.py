"""
Error hierarchy
Every error knows its CLI exit code and renders a machine-readable record
"""

from typing import Any, Dict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class HDGError(Exception):
    """Base class for all solver errors"""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details = details

    def to_record(self) -> Dict[str, Any]:
        return {
            "error_type": type(self).__name__,
            "message": str(self),
            "exit_code": self.exit_code,
            "details": {key: _plain(value) for key, value in self.details.items()},
        }


def _plain(value: Any) -> Any:
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


# Configuration

class ConfigError(HDGError):
    exit_code = EXIT_CONFIG


class InvalidModelError(ConfigError):
    """Wave speed not positive, not finite, or outside the configured bounds"""


# Mesh input

class MeshError(HDGError):
    exit_code = EXIT_CONFIG


class DegenerateExtentError(MeshError):
    pass


class MeshParseError(MeshError):
    pass


class InvertedCellError(MeshError):
    pass


class DanglingVertexError(MeshError):
    pass


class NonManifoldMeshError(MeshError):
    pass


class PointLocationError(MeshError):
    """A source or receiver lies outside the mesh"""


# Numerics

class NumericalError(HDGError):
    exit_code = EXIT_NUMERICAL


class QuadratureUnavailableError(NumericalError):
    pass


class LayoutError(NumericalError):
    """Structural mismatch between block sizes and the trace layout"""


class SingularCellError(NumericalError):
    pass


class SingularMatrixError(NumericalError):
    pass


class StaleFactorizationError(NumericalError):
    pass


class DimensionMismatchError(NumericalError):
    pass


class UnsupportedParameterError(NumericalError):
    pass


class UnsupportedOrderError(NumericalError):
    pass


class BoundaryConditionError(NumericalError):
    pass


# Data / files

class DataError(HDGError):
    exit_code = EXIT_IO
