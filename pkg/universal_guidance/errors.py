"""
Error types for universal guidance sampling.

Every error derives from UniversalGuidanceError and from the builtin that
callers would otherwise expect (ValueError, IndexError, ArithmeticError).
"""

from typing import Optional


class UniversalGuidanceError(Exception):
    """Base class for all package errors."""


class InvalidRangeError(UniversalGuidanceError, ValueError):
    """A parameter lies outside its admissible range."""


class DimensionMismatchError(UniversalGuidanceError, ValueError):
    """Array shapes disagree with the run dimension."""


class ScheduleIndexError(UniversalGuidanceError, IndexError):
    """Time index outside [0, T]."""


class DegenerateScheduleError(UniversalGuidanceError, ValueError):
    """alpha_t is 0 or 1 where a formula divides by it."""


class MissingJacobianError(UniversalGuidanceError, ValueError):
    """Forward guidance was requested without the denoiser Jacobian."""


class GradientUnavailableError(UniversalGuidanceError, ValueError):
    """A classifier was used for guidance but exposes no gradient."""


class ZeroEmbeddingError(UniversalGuidanceError, ArithmeticError):
    """Cosine similarity requested for a (near) zero embedding."""


class NonFiniteError(UniversalGuidanceError, ArithmeticError):
    """
    A loss or iterate became NaN/inf.

    Carries the sampling context so a run can report exactly where it
    aborted.
    """

    def __init__(
        self,
        message: str,
        t: Optional[int] = None,
        recurrence: Optional[int] = None,
        chain: Optional[int] = None,
        spec_index: Optional[int] = None,
    ):
        self.t = t
        self.recurrence = recurrence
        self.chain = chain
        self.spec_index = spec_index
        super().__init__(message)

    def with_context(self, **context) -> "NonFiniteError":
        """Return a copy with extra context fields filled in."""
        fields = {
            "t": self.t,
            "recurrence": self.recurrence,
            "chain": self.chain,
            "spec_index": self.spec_index,
        }
        fields.update({k: v for k, v in context.items() if v is not None})
        return NonFiniteError(self.args[0], **fields)

    def __str__(self) -> str:
        parts = [
            f"{name}={value}"
            for name, value in (
                ("t", self.t),
                ("n", self.recurrence),
                ("chain", self.chain),
                ("spec", self.spec_index),
            )
            if value is not None
        ]
        base = self.args[0] if self.args else "non-finite value"
        return f"{base} ({', '.join(parts)})" if parts else base


class ConfigError(UniversalGuidanceError, ValueError):
    """Run configuration failed to parse or validate."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        super().__init__(message)

    def __str__(self) -> str:
        base = self.args[0] if self.args else "invalid configuration"
        context = []
        if self.key:
            context.append(f"key '{self.key}'")
        if self.line is not None:
            context.append(f"line {self.line}")
        return f"{base} [{', '.join(context)}]" if context else base
