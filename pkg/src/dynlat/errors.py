"""Exception types raised across the package."""


class NotFoundError(KeyError):
    """Unknown preset or selector name."""


class InvalidShapeError(ValueError):
    """A shape or resolution violates a structural constraint."""


class DomainError(ValueError):
    """A numeric argument lies outside its valid domain."""


class ShapeError(ValueError):
    """Tensor or mask shapes disagree with the block they are used with."""
