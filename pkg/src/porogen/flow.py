"""Volumetric extrusion model: line width from flow fraction and back.

Conservation of mass between the filament fed into the extruder and the
bead laid on the bed, with the bead modelled as a rectangle capped by two
half discs (a "stadium").  All lengths in mm, flow as a fraction
(``gamma=1.0`` is nominal flow).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from enum import Enum

from porogen.errors import FlowModelError

QUARTER_PI = 0.25 * math.pi
GAMMA_MAX = 2.0


class Regime(Enum):
    TRACE = "trace"  # width >= layer height, fused stadium bead
    FIBER = "fiber"  # width < layer height, free-standing fibre


@dataclass(frozen=True)
class FlowParams:
    filament_diameter: float = 1.75
    nominal_width: float = 0.4
    layer_height: float = 0.2
    gamma: float = 1.0

    def __post_init__(self) -> None:
        for name in ("filament_diameter", "nominal_width", "layer_height"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise FlowModelError(f"{name} must be a positive length, got {value!r}")
        if not (0 < self.gamma <= GAMMA_MAX):
            raise FlowModelError(
                f"flow fraction must lie in (0, {GAMMA_MAX:g}], got {self.gamma!r}"
                " (percent values need a '%' suffix)"
            )

    def with_gamma(self, gamma: float) -> FlowParams:
        return replace(self, gamma=gamma)

    @property
    def filament_area(self) -> float:
        return QUARTER_PI * self.filament_diameter**2


def _width(gamma: float, nominal_width: float, layer_height: float) -> float:
    return gamma * nominal_width - layer_height * (QUARTER_PI - 1)


def regime_of(width: float, layer_height: float) -> Regime:
    return Regime.FIBER if width < layer_height else Regime.TRACE


def line_width(p: FlowParams) -> tuple[float, Regime]:
    """Predicted bead width (mm) for the given flow fraction, and its regime.

    The value is not clamped: below the layer height it is reported as a
    fibre diameter and tagged :attr:`Regime.FIBER`.
    """
    w = _width(p.gamma, p.nominal_width, p.layer_height)
    return w, regime_of(w, p.layer_height)


def width_bounds(nominal_width: float, layer_height: float) -> tuple[float, float]:
    """Open lower / closed upper width limits reachable with gamma in (0, 2]."""
    return _width(0.0, nominal_width, layer_height), _width(GAMMA_MAX, nominal_width, layer_height)


def gamma_for_width(target_width: float, nominal_width: float, layer_height: float) -> float:
    """Flow fraction that produces ``target_width``."""
    if not target_width > 0:
        raise FlowModelError(f"target width must be positive, got {target_width!r}")
    gamma = (target_width + layer_height * (QUARTER_PI - 1)) / nominal_width
    if not (0 < gamma <= GAMMA_MAX):
        lo, hi = width_bounds(nominal_width, layer_height)
        raise FlowModelError(
            f"unreachable width {target_width:g} mm: feasible widths are ({lo:.4f}, {hi:.4f}] mm"
            f" for nominal width {nominal_width:g} mm and layer height {layer_height:g} mm"
        )
    return gamma


def stadium_area(width: float, layer_height: float) -> float:
    return (width - layer_height) * layer_height + QUARTER_PI * layer_height**2


def cross_section_area(width: float, layer_height: float) -> float:
    """Area (mm^2) of a fused bead: rectangle plus two half discs."""
    if width < layer_height:
        raise FlowModelError(
            f"width {width:g} mm is below the layer height {layer_height:g} mm"
            " (fiber regime); use fiber_area"
        )
    return stadium_area(width, layer_height)


def fiber_area(width: float) -> float:
    """Area of a free fibre modelled as a circle of diameter ``width``."""
    if not width > 0:
        raise FlowModelError(f"fiber width must be positive, got {width!r}")
    return QUARTER_PI * width**2


def deposit_area(width: float, layer_height: float) -> float:
    """Geometric cross-section for either regime."""
    if width < layer_height:
        return fiber_area(width)
    return cross_section_area(width, layer_height)


def filament_feed(p: FlowParams, path_length: float) -> float:
    """Filament length (mm) the slicer feeds to extrude over ``path_length``."""
    if path_length < 0:
        raise FlowModelError(f"path length must be >= 0, got {path_length!r}")
    return p.gamma * p.nominal_width * p.layer_height * path_length / p.filament_area


def width_from_feed(feed: float, path_length: float, filament_diameter: float,
                    layer_height: float) -> float:
    """Bead width implied by feeding ``feed`` mm of filament over ``path_length`` mm."""
    if path_length == 0:
        raise FlowModelError("bead width is undefined for a zero-length path")
    return (QUARTER_PI * filament_diameter**2 * feed) / (layer_height * path_length) - layer_height * (
        QUARTER_PI - 1
    )


@dataclass(frozen=True)
class ExtrusionEvent:
    path_length: float
    filament_feed: float
    volume_in: float
    volume_out: float
    line_width: float
    regime: Regime


def extrusion_event(p: FlowParams, path_length: float) -> ExtrusionEvent:
    feed = filament_feed(p, path_length)
    width, regime = line_width(p)
    return ExtrusionEvent(
        path_length=path_length,
        filament_feed=feed,
        volume_in=p.filament_area * feed,
        volume_out=stadium_area(width, p.layer_height) * path_length,
        line_width=width,
        regime=regime,
    )


# --------------------------------------------------------------------------
# microscopy reference data

@dataclass(frozen=True)
class MicroscopyRow:
    flow_percent: int
    predicted_um: int
    measured_um: int
    abs_error_um: int


TABLE1: tuple[MicroscopyRow, ...] = (
    MicroscopyRow(10, 82, 73, 9),
    MicroscopyRow(20, 122, 123, 1),
    MicroscopyRow(30, 162, 164, 2),
    MicroscopyRow(40, 202, 193, 9),
    MicroscopyRow(50, 242, 252, 10),
    MicroscopyRow(60, 282, 277, 5),
    MicroscopyRow(80, 362, 366, 4),
    MicroscopyRow(100, 442, 430, 12),
)

# the same comparison is summarised elsewhere in the source as ~7 um and ~8.8 um
QUOTED_MEAN_ERRORS_UM = (7.0, 8.8)


@dataclass(frozen=True)
class Table1Row:
    flow_percent: int
    model_um: float
    table_predicted_um: int
    measured_um: int
    table_abs_error_um: int
    regime: Regime

    @property
    def model_error_um(self) -> float:
        return abs(self.model_um - self.measured_um)


@dataclass(frozen=True)
class Table1Report:
    rows: tuple[Table1Row, ...]
    table_mean_abs_error_um: float  # from the printed error column
    model_mean_abs_error_um: float  # |model - measured| averaged

    def max_prediction_gap_um(self) -> float:
        return max(abs(r.model_um - r.table_predicted_um) for r in self.rows)


def table1_report(p_base: FlowParams | None = None) -> Table1Report:
    p_base = p_base or FlowParams()
    if not (math.isclose(p_base.nominal_width, 0.4) and math.isclose(p_base.layer_height, 0.2)):
        raise FlowModelError("the microscopy reference was printed with a 0.4 mm width at 0.2 mm layers")
    rows = []
    for ref in TABLE1:
        width, regime = line_width(p_base.with_gamma(ref.flow_percent / 100))
        rows.append(
            Table1Row(ref.flow_percent, width * 1000, ref.predicted_um, ref.measured_um,
                      ref.abs_error_um, regime)
        )
    n = len(TABLE1)
    return Table1Report(
        rows=tuple(rows),
        table_mean_abs_error_um=sum(r.abs_error_um for r in TABLE1) / n,
        model_mean_abs_error_um=sum(r.model_error_um for r in rows) / n,
    )


def table1_csv() -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["flow_percent", "predicted_um", "measured_um", "abs_error_um"])
    for r in TABLE1:
        writer.writerow([r.flow_percent, r.predicted_um, r.measured_um, r.abs_error_um])
    return buf.getvalue()


def parse_gamma(value: str | float | int) -> float:
    """Flow fraction from ``0.3``, ``"0.3"`` or ``"30%"``.

    Percent needs an explicit ``%``; a bare number is always a fraction.
    """
    if isinstance(value, str):
        text = value.strip()
        try:
            gamma = float(text[:-1]) / 100 if text.endswith("%") else float(text)
        except ValueError:
            raise FlowModelError(f"cannot read flow value {value!r}") from None
    else:
        gamma = float(value)
    if not (0 < gamma <= GAMMA_MAX):
        raise FlowModelError(
            f"flow fraction must lie in (0, {GAMMA_MAX:g}], got {value!r}"
            " (write percent as e.g. '30%')"
        )
    return gamma
