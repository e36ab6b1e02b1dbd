"""Exception types shared across the package.

Two failure families are distinguished so the command line tool can map
them to distinct exit codes: bad user input (exit 1) versus numerical
breakdown during iteration (exit 2).
"""

from __future__ import annotations


class InputError(ValueError):
    """Invalid argument, malformed file, or inconsistent configuration."""


class NumericError(RuntimeError):
    """Numerical failure (non-finite values, iteration caps, singular solves).

    ``value`` optionally carries the best result found before the failure,
    ``iteration`` the step at which the failure was detected.
    """

    def __init__(self, message: str, *, value=None, iteration: int | None = None):
        super().__init__(message)
        self.value = value
        self.iteration = iteration
