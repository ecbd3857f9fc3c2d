"""Exception taxonomy shared across the platform."""

from __future__ import annotations


class ExpforgeError(Exception):
    """Base class for all platform errors."""


# --- experiment composition -------------------------------------------------

class DuplicateTaskName(ExpforgeError):
    pass


class EmptyStage(ExpforgeError):
    pass


class NodeAlreadyAssigned(ExpforgeError):
    pass


class EmptyNodeList(ExpforgeError):
    pass


class InsufficientNodes(ExpforgeError):
    pass


# --- compilation ------------------------------------------------------------

class EnvironmentConflict(ExpforgeError):
    """Two requirements declare the same logical need with different values.

    Carries both conflicting declarations so callers can report them.
    """

    def __init__(self, message: str, first=None, second=None):
        super().__init__(message)
        self.first = first
        self.second = second


class UnsupportedTaskForKind(ExpforgeError):
    pass


# --- lifecycle --------------------------------------------------------------

class ValidationFailed(ExpforgeError):
    def __init__(self, issues):
        super().__init__("; ".join(str(i) for i in issues) or "validation failed")
        self.issues = list(issues)


class UnknownExperiment(ExpforgeError):
    pass


class DuplicateExperimentName(ExpforgeError):
    pass


class InvalidTransition(ExpforgeError):
    """Requested lifecycle move is not an edge of the transition relation."""


class NotReady(InvalidTransition):
    pass


class AlreadyTerminal(InvalidTransition):
    pass


class WrongPhase(InvalidTransition):
    pass


class UnknownAssignment(ExpforgeError):
    pass


# --- connectivity -----------------------------------------------------------

class ConnectorUnavailable(ExpforgeError):
    pass


class LaunchFailed(ExpforgeError):
    pass


class NodeUnreachable(LaunchFailed):
    pass


# --- client / wire ----------------------------------------------------------

class TransportError(ExpforgeError):
    """The remote service could not be reached or answered garbage."""


class ManifestError(ExpforgeError):
    """Manifest document is syntactically or structurally invalid."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line = line
        self.column = column
