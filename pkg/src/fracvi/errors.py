"""Exception types shared across the package."""


class FracviError(Exception):
    """Base class for all package errors."""


class ValidationError(FracviError):
    """An invariant of a problem instance or configuration is violated."""


class ParseError(FracviError):
    """Problem-file syntax error, with line/column information."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {column}" if column is not None else "") + ")"
        super().__init__(message + loc)


class NonConvergence(FracviError):
    """An iterative solve reached its iteration cap.

    Carries the final residual and, when raised from the penalization
    ladder, the level index and last iterate.
    """

    def __init__(self, message, residual=None, iterations=None, level=None, last_iterate=None):
        self.residual = residual
        self.iterations = iterations
        self.level = level
        self.last_iterate = last_iterate
        detail = []
        if residual is not None:
            detail.append(f"residual={residual:.3e}")
        if iterations is not None:
            detail.append(f"iterations={iterations}")
        if level is not None:
            detail.append(f"level={level}")
        suffix = f" [{', '.join(detail)}]" if detail else ""
        super().__init__(message + suffix)


class NotSymmetric(FracviError):
    """The coefficient matrix is not symmetric where symmetry is required."""


class CoercivityViolation(FracviError):
    """The coercivity audit failed during a run; indicates a bug upstream."""
