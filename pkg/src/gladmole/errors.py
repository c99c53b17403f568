"""Exception hierarchy shared by every gladmole module."""


class GladError(Exception):
    """Base class for all errors raised by gladmole."""


class ShapeError(GladError, ValueError):
    """Operand shapes do not agree."""


class InvalidInputError(GladError, ValueError):
    """An input value violates a documented precondition."""


class ConfigError(GladError, ValueError):
    """An encoder or CLI configuration is invalid."""


class MalformedSequenceError(InvalidInputError):
    """An SOT token sequence has leading, trailing or adjacent separators."""


class InfeasibleError(GladError, RuntimeError):
    """A sampling request (band target, hour budget) cannot be satisfied."""

    def __init__(self, message, band=None):
        super().__init__(message)
        self.band = band


class IdMismatchError(InvalidInputError):
    """Reference and hypothesis manifests do not cover the same utterance ids."""

    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        parts = []
        if self.missing:
            parts.append("missing hypotheses for: " + ", ".join(self.missing))
        if self.extra:
            parts.append("hypotheses without reference: " + ", ".join(self.extra))
        super().__init__("; ".join(parts))
