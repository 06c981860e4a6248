"""Exception hierarchy.

Every domain error carries a short machine-readable ``code`` that the CLI
prints on stderr before exiting with status 1.
"""


class MeshPrefError(Exception):
    code = "error"


class ParseError(MeshPrefError):
    code = "parse_error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidMeshError(MeshPrefError):
    code = "invalid_mesh"


class DegenerateFaceError(MeshPrefError):
    code = "degenerate_face"

    def __init__(self, face, message=None):
        self.face = int(face)
        super().__init__(message or f"face {self.face} is degenerate")


class IsolatedVertexError(MeshPrefError):
    code = "isolated_vertex"

    def __init__(self, vertex):
        self.vertex = int(vertex)
        super().__init__(f"vertex {self.vertex} is not used by any non-degenerate face")


class InvalidTargetError(MeshPrefError):
    code = "invalid_target"


class SimplificationError(MeshPrefError):
    code = "simplification_failed"


class CapacityError(MeshPrefError):
    code = "capacity_exceeded"


class InvalidBandwidthError(MeshPrefError):
    code = "invalid_bandwidth"


class DimensionMismatchError(MeshPrefError):
    code = "dimension_mismatch"


class NonFiniteError(MeshPrefError):
    code = "non_finite"


class NumericDomainError(MeshPrefError):
    code = "numeric_domain"


class NotSPDError(MeshPrefError):
    code = "not_spd"


class ShapeError(MeshPrefError):
    code = "shape_mismatch"


class StaleCacheError(MeshPrefError):
    code = "stale_cache"


class PopulationError(MeshPrefError):
    code = "missing_population"


class ScheduleError(MeshPrefError):
    code = "invalid_schedule"


class ConfigError(MeshPrefError):
    code = "invalid_config"


class FormatError(MeshPrefError):
    code = "format_error"
