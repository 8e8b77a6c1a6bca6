"""Exception hierarchy shared by all stages."""


class MeshInpaintError(Exception):
    """Base class for errors raised by this package."""


class MeshFormatError(MeshInpaintError):
    """A mesh file could not be parsed."""


class MeshDataError(MeshInpaintError):
    """Parsed data does not describe a valid triangle mesh."""


class DegenerateGeometryError(MeshDataError):
    def __init__(self, message, face=None):
        super().__init__(message)
        self.face = face


class MeshStructureError(MeshInpaintError):
    """Connectivity violates a structural precondition (manifoldness, isolated vertices)."""


class SimplificationError(MeshInpaintError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class LossUndefinedError(MeshInpaintError):
    """A masked loss has no unmasked elements to average over."""


class NumericError(MeshInpaintError):
    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class StateError(MeshInpaintError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ConfigError(MeshInpaintError):
    """Invalid or unknown configuration entry."""
