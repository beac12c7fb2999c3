"""Scenario runner, vulnerability matrix and command-line interface."""

from .matrix import EXPECTED, Knobs, MatrixRow, format_matrix, knobs_from_flags, run_matrix
from .runner import Batch, Summary, build_scenario_world, run_scenario
from .scenario import Scenario, load_scenario, scenario_from_text

__all__ = ["EXPECTED", "Batch", "Knobs", "MatrixRow", "Scenario", "Summary",
           "build_scenario_world", "format_matrix", "knobs_from_flags", "load_scenario",
           "run_matrix", "run_scenario", "scenario_from_text"]
