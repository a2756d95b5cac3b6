"""Exception types, grouped so the CLI can map them to exit codes."""


class DataError(Exception):
    """Bad input data (files, meshes, volumes). CLI exit code 3."""


class MeshFormatError(DataError):
    """Unparseable mesh file; carries a line number when known."""

    def __init__(self, message, path=None, line=None):
        if path is not None:
            message = f"{path}: {message}"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.path = path
        self.line = line


class NonManifoldError(DataError):
    """Boundary surface is not a closed 2-manifold."""


class DegenerateTetError(DataError):
    """A tetrahedron has (near-)zero signed volume."""


class VolumeFormatError(DataError):
    """Unsupported or malformed scalar-volume file."""


class ParcellationError(DataError):
    """Boundary parcellation failed (empty cluster, consumed margin, ...)."""


class ConvergenceError(Exception):
    """Optimization failed to converge. CLI exit code 4."""
