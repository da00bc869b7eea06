"""Exception hierarchy shared by all porogen modules."""

from __future__ import annotations


class PorogenError(Exception):
    """Base class for every error raised by porogen."""


class GCodeParseError(PorogenError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ReplayError(PorogenError):
    def __init__(self, message: str, line_index: int) -> None:
        super().__init__(f"line {line_index + 1}: {message}")
        self.line_index = line_index


class FlowModelError(PorogenError, ValueError):
    """Invalid flow parameters, regime misuse or unreachable targets."""


class RegionError(PorogenError):
    """Bad region definitions or a transform that cannot be applied."""


class ToolchangeError(RegionError):
    pass


class SimulationError(PorogenError):
    pass


class AnalysisError(PorogenError):
    pass
