class BinsemError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(BinsemError, ValueError):
    """Input does not satisfy a documented schema or precondition.

    The CLI maps this to exit code 1; every other failure exits with 2.
    """


class SchemaError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(f"field {path}")
        full = message if not where else f"{message} ({', '.join(where)})"
        super().__init__(full)
        self.message = message


class VocabMismatchError(ValidationError):
    pass


class TrainingDivergedError(BinsemError):
    pass
