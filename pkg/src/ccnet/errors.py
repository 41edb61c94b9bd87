"""Exception types raised across the package."""


class CCNetError(Exception):
    """Base class for all package errors."""


class DimensionError(CCNetError, ValueError):
    """Operand shapes do not agree for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(CCNetError, ValueError):
    """A documented precondition was violated by the caller."""


class EmptyInputError(ContractError):
    pass


class SliceRangeError(CCNetError, IndexError):
    pass


class MissingIdError(CCNetError, KeyError):
    def __str__(self):
        return f"unknown image id {self.args[0]!r}"


class SizeMismatchError(CCNetError, ValueError):
    pass


class ParseError(CCNetError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ValidationError(CCNetError, ValueError):
    pass


class FormatError(CCNetError, ValueError):
    pass


class IntegrityError(CCNetError, ValueError):
    pass


class InfeasibleSpecError(CCNetError, ValueError):
    pass


class NonFiniteLossError(CCNetError, FloatingPointError):
    pass


class GradCheckError(CCNetError, AssertionError):
    pass
