"""Run configuration: printer profile and per-command settings.

Config files are TOML::

    [printer]
    filament_diameter = 1.75   # mm
    nominal_width = 0.4        # mm, usually the nozzle diameter
    layer_height = 0.2         # mm
    dialect = "marlin"

    [transform]
    regions = "regions.toml"   # relative to the config file
    source_gamma = "100%"      # flow already baked into the input G-code
    arc_tolerance = 0.01       # mm
    remove_toolchanges = false
    tool_alias = { "1" = 0 }   # virtual tool -> physical extruder
    toolchange_block_start = "TOOLCHANGE START"
    toolchange_block_end = "TOOLCHANGE END"

    [simulate]
    resolution = 0.01          # mm per raster cell
    workers = 1

    [analyze]
    tolerance = 0.05           # relative deviation from a reference mean

    [report]
    path = "report.json"

Command-line flags override anything read from the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from porogen.errors import PorogenError
from porogen.flow import FlowParams, parse_gamma

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(PorogenError):
    pass


def load_toml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class RunConfig:
    filament_diameter: float = 1.75
    nominal_width: float = 0.4
    layer_height: float = 0.2
    dialect: str = "marlin"
    regions: Path | None = None
    source_gamma: float = 1.0
    arc_tolerance: float = 0.01
    remove_toolchanges: bool = False
    tool_alias: dict[int, int] = field(default_factory=dict)
    toolchange_block_start: str = "TOOLCHANGE START"
    toolchange_block_end: str = "TOOLCHANGE END"
    resolution: float = 0.01
    workers: int = 1
    tolerance: float = 0.05
    report: Path | None = None

    def flow_params(self, gamma: float = 1.0) -> FlowParams:
        return FlowParams(self.filament_diameter, self.nominal_width, self.layer_height, gamma)

    def update(self, **overrides: Any) -> None:
        """Apply non-None overrides (typically parsed CLI flags)."""
        names = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in names:
                raise ConfigError(f"unknown setting {key!r}")
            setattr(self, key, value)
        self.validate()

    def validate(self) -> None:
        if self.dialect.lower() != "marlin":
            raise ConfigError(f"unsupported dialect {self.dialect!r} (only 'marlin')")
        self.flow_params(self.source_gamma)
        if not self.resolution > 0:
            raise ConfigError("resolution must be positive")
        if not self.arc_tolerance > 0:
            raise ConfigError("arc tolerance must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")


_SECTIONS = {
    "printer": ("filament_diameter", "nominal_width", "layer_height", "dialect"),
    "transform": ("regions", "source_gamma", "arc_tolerance", "remove_toolchanges", "tool_alias",
                  "toolchange_block_start", "toolchange_block_end"),
    "simulate": ("resolution", "workers"),
    "analyze": ("tolerance",),
}


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    data = load_toml(path)
    values: dict[str, Any] = {}
    for section, keys in _SECTIONS.items():
        table = data.get(section, {})
        unknown = set(table) - set(keys)
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
        values.update(table)
    if "path" in data.get("report", {}):
        values["report"] = path.parent / data["report"]["path"]
    if "regions" in values:
        values["regions"] = path.parent / values["regions"]
    if "source_gamma" in values:
        values["source_gamma"] = parse_gamma(values["source_gamma"])
    if "tool_alias" in values:
        values["tool_alias"] = parse_tool_alias(values["tool_alias"])
    try:
        cfg.update(**values)
    except PorogenError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def parse_tool_alias(value: Any) -> dict[int, int]:
    """``{"1": 0}`` or ``"0=0,1=0"`` -> ``{0: 0, 1: 0}``."""
    try:
        if isinstance(value, str):
            pairs = [item.split("=") for item in value.split(",") if item.strip()]
            return {int(k): int(v) for k, v in pairs}
        return {int(k): int(v) for k, v in dict(value).items()}
    except (TypeError, ValueError):
        raise ConfigError(f"bad tool alias {value!r}; expected e.g. '0=0,1=0'") from None
