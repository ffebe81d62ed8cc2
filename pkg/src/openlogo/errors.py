"""Exception types shared across the package."""


class OpenLogoError(ValueError):
    """Bad input: malformed files, violated preconditions, unknown ids."""


class InvariantError(RuntimeError):
    """An internal postcondition did not hold. Indicates a bug, not bad input."""
