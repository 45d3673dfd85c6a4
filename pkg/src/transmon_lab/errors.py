"""Exception types shared across the laboratory.

Every failure mode named in the module contracts maps to one of these, so
callers (and the CLI) can translate them into exit codes without string
matching.
"""

from __future__ import annotations


class TransmonLabError(Exception):
    """Base class for all laboratory errors."""


class InvalidParameterError(TransmonLabError, ValueError):
    """A physical parameter is outside its documented domain."""


class RangeError(TransmonLabError, ValueError):
    """An argument left the validated envelope of a numerical routine."""


class IntegrationFailureError(TransmonLabError, RuntimeError):
    """Trajectory integration produced a non-finite state.

    Carries the last time at which the state was still finite.
    """

    def __init__(self, message: str, last_valid_time: float | None = None):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class ConvergenceError(TransmonLabError, RuntimeError):
    """A resolution-doubling or subsample re-run check failed its threshold."""


class AccuracyError(TransmonLabError, RuntimeError):
    """Requested accuracy is unattainable with the supplied discretization."""


class UnitarityError(TransmonLabError, RuntimeError):
    """A one-period propagator failed its unitarity gate."""


class InsufficientDataError(TransmonLabError, ValueError):
    """A fit window contains too few points to be meaningful."""


class EmptyLayerError(TransmonLabError, RuntimeError):
    """No chaotic modes / no chaotic layer at the requested parameters."""


class SchemaError(TransmonLabError, ValueError):
    """A CSV or config file does not match its documented schema."""
