"""Exception hierarchy shared by the planning stages."""

from __future__ import annotations


class PlanningError(Exception):
    """A pipeline stage could not produce its output.

    ``stage`` names the failing stage and ``reason`` is a short
    machine-readable token (``"unreachable"``, ``"timeout"``, ...).
    """

    stage = "unknown"

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class ScenarioError(PlanningError):
    stage = "input"


class MapfError(PlanningError):
    stage = "mapf"


class CorridorError(PlanningError):
    stage = "sfc"


class RsfcError(PlanningError):
    stage = "rsfc"


class TimeAllocationError(PlanningError):
    stage = "timealloc"


class QPAssemblyError(PlanningError):
    stage = "qp"
