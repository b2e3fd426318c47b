"""Exception types raised across the package."""

from __future__ import annotations


class OmniMoeError(Exception):
    """Base class for all package errors."""


class DimensionError(OmniMoeError, ValueError):
    pass


class NonFiniteError(OmniMoeError, FloatingPointError):
    pass


class UnknownSubjectError(OmniMoeError, LookupError):
    def __init__(self, subject, known):
        self.subject = subject
        self.known = sorted(known)
        super().__init__(f"unknown subject {subject!r}; known subjects: {self.known}")

    def __str__(self) -> str:
        return self.args[0]


class ZeroNormError(OmniMoeError, ValueError):
    pass


class ConfigError(OmniMoeError, ValueError):
    pass


class FormatError(OmniMoeError, ValueError):
    """A binary or text file does not match its expected layout."""


class DegenerateSampleError(OmniMoeError, ValueError):
    pass


class DivergenceError(OmniMoeError, RuntimeError):
    pass
