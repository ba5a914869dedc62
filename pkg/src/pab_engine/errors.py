"""Exception hierarchy. Every error carries a stable machine-readable kind."""


class EngineError(Exception):
    kind = "engine-error"

    def __init__(self, message, kind=None):
        super().__init__(message)
        if kind is not None:
            self.kind = kind


class ShapeError(EngineError):
    """Operand shapes are incompatible."""

    kind = "shape-mismatch"


class ValidationError(EngineError):
    """A config, policy, or argument violates its invariants."""

    kind = "invalid-config"


class PolicyError(EngineError):
    """A decision table and a cache store disagree at runtime."""

    kind = "policy-error"


class MetricError(EngineError):
    """A metric is undefined for the given inputs (e.g. zero-norm reference)."""

    kind = "undefined-metric"


class ArtifactError(EngineError):
    """A required run artifact is missing or malformed."""

    kind = "missing-artifact"
