"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    """Malformed or inconsistent input to a library call."""


class AlignmentError(ValueError):
    """Trajectory alignment has no unique solution."""


class GenerationError(ValueError):
    """A synthetic scene cannot be rendered as specified."""

    def __init__(self, message, pose_index=None):
        super().__init__(message)
        self.pose_index = pose_index


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class ParseError(ValueError):
    """A text input (trajectory file, config) could not be parsed."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field
