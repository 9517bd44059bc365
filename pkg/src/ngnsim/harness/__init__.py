"""Scenario files, the wired simulation and the command line."""

from .runner import IoError, RunReport, Simulation, run_scenario, write_outputs
from .scenario import Issue, ParseError, Scenario, ValidationErrors, parse_scenario, parse_text

__all__ = [
    "IoError",
    "Issue",
    "ParseError",
    "RunReport",
    "Scenario",
    "Simulation",
    "ValidationErrors",
    "parse_scenario",
    "parse_text",
    "run_scenario",
    "write_outputs",
]
