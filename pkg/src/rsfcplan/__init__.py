"""Multi-quadrotor trajectory planning with safe and relative safe flight corridors."""

from .errors import PlanningError
from .scenario import AgentSpec, Box, PlannerConfig, Scenario, VoxelMap, load_scenario

__all__ = ["AgentSpec", "Box", "PlannerConfig", "PlanningError", "Scenario", "VoxelMap", "load_scenario"]
__version__ = "0.1.0"
