"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateGeometryError(ValueError):
    """Raised when a point set is too degenerate for the requested operation."""

    def __init__(self, message, rank=None):
        super().__init__(message if rank is None else f"{message} (rank={rank})")
        self.rank = rank


class ParseError(ValueError):
    """Raised for malformed sequence or matrix-stream files."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class FreezeAuditError(RuntimeError):
    """Raised when a parameter that should be frozen changed during training."""
