"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(RuntimeError):
    """A numerical routine failed to produce a trustworthy result.

    Parameters
    ----------
    message : str
        Human-readable description.
    residual : float, optional
        Final residual of the failing solve, when one exists.
    iteration : int, optional
        Outer solver iteration at which the failure surfaced.
    trace : tuple, optional
        Per-iteration records completed before the failure.
    """

    def __init__(self, message: str, residual: float | None = None,
                 iteration: int | None = None, trace: tuple = ()):
        super().__init__(message)
        self.residual = residual
        self.iteration = iteration
        self.trace = tuple(trace)

    def with_iteration(self, iteration: int, trace: tuple = ()) -> "NumericalFailureError":
        err = NumericalFailureError(f"{self.args[0]} (iteration {iteration})",
                                    residual=self.residual, iteration=iteration, trace=trace)
        err.__cause__ = self
        return err


class ConfigError(InvalidArgumentError):
    """A scenario or solver configuration is malformed or inconsistent."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
