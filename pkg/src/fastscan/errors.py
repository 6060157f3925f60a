"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the operation's contract."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of the operation."""


class ManifestError(RuntimeError):
    """A weight directory's manifest is missing entries or inconsistent."""
