"""Exception hierarchy.

Everything raised on purpose derives from :class:`SPAError`.  Input problems
derive from :class:`ValidationError` (CLI exit code 1); failures that happen
while computing on valid input derive from :class:`ComputeError` (exit code 2).
"""


class SPAError(Exception):
    pass


class ValidationError(SPAError, ValueError):
    pass


class ComputeError(SPAError, RuntimeError):
    pass


# embedding_store
class MalformedHeader(ValidationError):
    pass


class SizeMismatch(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class OutOfRangeLabel(ValidationError):
    pass


class ZeroRow(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NormViolation(DimensionMismatch):
    pass


class LengthMismatch(DimensionMismatch):
    pass


# task graph
class GraphError(ValidationError):
    pass


class UnknownNodeInEdge(GraphError):
    pass


class DurationOrderViolation(GraphError):
    pass


class NoStartPhase(GraphError):
    pass


class DeadEndPhase(GraphError):
    pass


class UnreachableTerminal(GraphError):
    pass


class MaxLenTooSmall(ValidationError):
    pass


# diffusion / tta / bench
class InvalidRange(ValidationError):
    pass


class StepOutOfRange(ValidationError):
    pass


class InvalidTemperature(ValidationError):
    pass


class WeightViolation(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class EmptyDataset(ComputeError):
    pass


class NonFiniteLoss(ComputeError):
    pass


class PackingFailure(ComputeError):
    pass
