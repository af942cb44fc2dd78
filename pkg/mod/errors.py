"""Exception hierarchy for the adaptive safety pipeline.

Every error carries the exit code the CLI reports for it, so scripts can
distinguish a bad config from a missing checkpoint without parsing messages.
"""

import copy
from typing import Optional


class BASError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1

    def __init__(self, message: str, phase: Optional[str] = None):
        self.phase = phase
        if phase:
            message = f"[{phase}] {message}"
        super().__init__(message)

    def with_phase(self, phase: str) -> "BASError":
        """Return a copy of this error tagged with a pipeline phase."""
        if self.phase:
            return self
        err = copy.copy(self)
        err.phase = phase
        err.args = (f"[{phase}] {self.args[0]}",) + tuple(self.args[1:])
        return err


class ConfigError(BASError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DependencyError(BASError, RuntimeError):
    """A phase was started without the artifacts it depends on."""

    exit_code = 3


class ContractError(BASError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 4


class InvalidStateError(ContractError):
    """A state or parameter vector contains non-finite entries."""


class TrainingDivergedError(BASError, RuntimeError):
    """A loss or return became non-finite during optimization."""

    exit_code = 5


class NonFiniteValueError(BASError, RuntimeError):
    """Value iteration produced a non-finite cell."""

    exit_code = 5

    def __init__(self, message: str, cell_index: Optional[int] = None,
                 phase: Optional[str] = None):
        self.cell_index = cell_index
        super().__init__(message, phase=phase)


class BudgetExceededError(BASError, ValueError):
    """An exhaustive computation was refused because it is too large."""

    exit_code = 6


class LipschitzConditionError(BASError, ValueError):
    """The finiteness condition gamma * (1 + L_f) < 1 does not hold."""

    exit_code = 7
