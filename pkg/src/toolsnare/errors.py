"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ToolsnareError(Exception):
    """Base class for all package errors."""


class InjectionUnsupported(ToolsnareError):
    """The output map has no text-valued field that can carry a command."""


class ChainTooShort(ToolsnareError):
    """A toolchain needs at least two tools to form victim/attacker pairs."""


class BackendError(ToolsnareError):
    """An agent backend failed mid-episode.

    Carries the partial trace collected before the failure so callers can
    inspect how far the episode got.
    """

    def __init__(self, message: str, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


class ActionParseError(BackendError):
    """A remote backend reply could not be parsed into a thought/action."""


class AttackerNotReached(ToolsnareError):
    """The clean toolchain never invokes the designated malicious tool."""


class EmptyBatch(ToolsnareError):
    """Metrics requested over an empty result batch."""


class EmptyDB(ToolsnareError):
    """Retrieval requested against an attack database with no cases."""


class EmptyTrials(ToolsnareError):
    """A security-test run needs at least one trial."""


class NumericalError(ToolsnareError):
    """A policy update received non-finite inputs."""


class ScenarioLoadError(ToolsnareError):
    """A scenario file failed validation; message names the field and id."""
