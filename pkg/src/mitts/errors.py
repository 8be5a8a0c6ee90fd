"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A precondition on data, configuration, or CLI input was violated."""
