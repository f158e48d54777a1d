"""Exception hierarchy.

Every error raised by the package derives from :class:`TensorVBError`.
Validation problems additionally derive from :class:`ValueError`, numeric
breakdowns from :class:`ArithmeticError`, so callers can catch either family.
"""


class TensorVBError(Exception):
    pass


class ValidationError(TensorVBError, ValueError):
    """Input does not satisfy a structural invariant."""


class NumericError(TensorVBError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


# tensor-core
class UnknownIndex(ValidationError):
    pass


class OutOfRangeCoordinate(ValidationError):
    pass


class DuplicateCoordinate(ValidationError):
    pass


class NegativeValue(ValidationError):
    pass


class TooLargeToMaterialize(ValidationError):
    pass


class InvalidPrior(ValidationError):
    pass


# model-spec
class ModelSyntaxError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class UncoveredVisibleIndex(ValidationError):
    pass


class OrphanFactor(ValidationError):
    pass


# contraction
class ShapeMismatch(ValidationError):
    pass


class FactorNotConnected(ValidationError):
    pass


class NonFiniteResult(NumericError):
    pass


# solvers
class NonFiniteUpdate(NumericError):
    pass


class DomainError(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


# eval
class EmptyTensor(ValidationError):
    pass


class DegenerateSplit(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class SupportMismatch(ValidationError):
    pass


# synth / io
class InvalidSpec(ValidationError):
    pass


class ConflictingDuplicate(ValidationError):
    pass


class DataFormatError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = f"{path}:" if path is not None else ""
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
