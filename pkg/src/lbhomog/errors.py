"""Exception types raised by the toolkit."""


class LBHomogError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(LBHomogError, ValueError):
    pass


class MeshError(LBHomogError):
    pass


class MeshQualityError(MeshError):
    """Raised when a generated mesh misses its quality bounds."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TopologyError(MeshError):
    pass


class AssemblyError(LBHomogError):
    pass


class ConstraintError(LBHomogError):
    pass


class SolverError(LBHomogError):
    """Iterative solver failed to converge; carries the residual history."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class CompatibilityError(LBHomogError):
    pass


class ConfigError(LBHomogError, ValueError):
    """Invalid run configuration.

    ``violations`` lists one ``"section.key: message"`` string per broken rule.
    """

    def __init__(self, message, violations=None, lineno=None):
        super().__init__(message)
        self.violations = list(violations or [])
        self.lineno = lineno
