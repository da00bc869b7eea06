"""Region-wise flow control for FDM toolpaths.

Lowers extrusion inside chosen volumes so the printed plastic turns into
a lattice of thin fibres that a cast silicone can flow into and lock onto.
"""

__version__ = "0.1.0"
REPORT_SCHEMA = "porogen.run_report/1"

from porogen.errors import (  # noqa: E402
    AnalysisError,
    FlowModelError,
    GCodeParseError,
    PorogenError,
    RegionError,
    ReplayError,
    SimulationError,
    ToolchangeError,
)
from porogen.flow import FlowParams, Regime, line_width, parse_gamma  # noqa: E402
from porogen.gcode import parse_document, read_document, replay  # noqa: E402
from porogen.regions import Box, Cylinder, RegionSpec, ZSlab, apply_regions, remove_redundant_toolchanges  # noqa: E402

__all__ = [
    "AnalysisError", "Box", "Cylinder", "FlowModelError", "FlowParams", "GCodeParseError", "PorogenError",
    "REPORT_SCHEMA", "Regime", "RegionError", "RegionSpec", "ReplayError", "SimulationError", "ToolchangeError",
    "ZSlab", "apply_regions", "line_width", "parse_document", "parse_gamma", "read_document",
    "remove_redundant_toolchanges", "replay", "__version__",
]
