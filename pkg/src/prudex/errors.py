"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PrudexError(Exception):
    exit_code = 1


class MissingInputError(PrudexError):
    exit_code = 3


class ParseError(PrudexError):
    exit_code = 4

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PrudexError):
    exit_code = 4


class EmptyPanelError(ValidationError):
    pass


class InsufficientHistoryError(ValidationError):
    pass


class SchemaError(PrudexError):
    exit_code = 4


class MissingDataError(SchemaError):
    def __init__(self, cells):
        self.cells = list(cells)
        shown = ", ".join(str(c) for c in self.cells[:10])
        more = "" if len(self.cells) <= 10 else f" (+{len(self.cells) - 10} more)"
        super().__init__(f"missing cells: {shown}{more}")


class NumericDomainError(PrudexError, ValueError):
    exit_code = 4


class InvalidActionError(NumericDomainError):
    pass


class NonFiniteError(PrudexError, FloatingPointError):
    """Raised when a loss or gradient stops being finite."""
    exit_code = 5


class TrainingAbort(NonFiniteError):
    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class TransportError(PrudexError):
    exit_code = 6

    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class OfflineError(TransportError):
    pass


class TemplateError(PrudexError):
    exit_code = 4

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
