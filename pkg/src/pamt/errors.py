"""Exception types shared across the package."""

from __future__ import annotations


class PamtError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(PamtError):
    """Operands fed to a primitive have incompatible shapes."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(PamtError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"{primitive}: non-finite value in output"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyBagError(PamtError):
    """An operation that needs at least one instance received an empty bag."""


class DataError(PamtError):
    """Invalid dataset, split, or assignment content."""


class ConfigError(PamtError):
    """A configuration value violates its documented constraints."""
