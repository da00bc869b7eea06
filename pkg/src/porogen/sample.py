"""Rectilinear test-coupon toolpaths: a solid base with a porous top section."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from porogen.errors import RegionError
from porogen.flow import FlowParams, filament_feed
from porogen.gcode import GCodeDocument, format_number, parse_document


@dataclass(frozen=True)
class SampleSpec:
    """Coupon geometry.  ``params.gamma`` is the flow of the porous layers.

    Defaults reproduce the 20 x 20 x 3 mm microscopy coupon: 1 mm solid
    base, 2 mm porous top, 0.2 mm layers, 80 mm/s print speed.
    """

    width: float = 20.0
    depth: float = 20.0
    solid_height: float = 1.0
    porous_height: float = 2.0
    params: FlowParams = field(default_factory=FlowParams)
    solid_pitch: float | None = None  # default: nominal line width
    porous_pitch: float | None = None  # default: twice the nominal line width
    origin: tuple[float, float] = (0.0, 0.0)
    print_feedrate: float = 4800.0  # mm/min
    travel_feedrate: float = 9000.0
    absolute_e: bool = False
    alternate: bool = True  # rotate line direction by 90 degrees every layer


def _layer_count(height: float, layer_height: float, what: str) -> int:
    n = round(height / layer_height)
    if height < 0 or not math.isclose(n * layer_height, height, abs_tol=1e-9):
        raise RegionError(f"{what} height {height:g} mm is not a multiple of the layer height {layer_height:g} mm")
    return n


def _line_offsets(span: float, pitch: float) -> list[float]:
    n = max(1, math.floor(span / pitch + 1e-9))
    first = (span - (n - 1) * pitch) / 2
    return [first + i * pitch for i in range(n)]


def plan_porous_sample(spec: SampleSpec | None = None) -> GCodeDocument:
    spec = spec or SampleSpec()
    p = spec.params
    lh = p.layer_height
    n_solid = _layer_count(spec.solid_height, lh, "solid")
    n_porous = _layer_count(spec.porous_height, lh, "porous")
    solid_pitch = spec.solid_pitch or p.nominal_width
    porous_pitch = spec.porous_pitch or 2 * p.nominal_width
    if solid_pitch <= 0 or porous_pitch <= 0:
        raise RegionError("line pitch must be positive")
    solid = p.with_gamma(1.0)
    x0, y0 = spec.origin

    def fx(v: float) -> str:
        return format_number(v, 3)

    out = [
        f";porogen sample {fx(spec.width)}x{fx(spec.depth)}x{fx(spec.solid_height + spec.porous_height)} mm",
        f";solid layers={n_solid} porous layers={n_porous} porous flow={format_number(p.gamma, 4)}",
        "G21",
        "G90",
        "M82" if spec.absolute_e else "M83",
        "G92 E0",
    ]
    e_total = 0.0
    for k in range(n_solid + n_porous):
        porous = k >= n_solid
        layer = p if porous else solid
        pitch = porous_pitch if porous else solid_pitch
        z = round((k + 1) * lh, 6)
        along_y = not (spec.alternate and k % 2)
        out.append(f";LAYER:{k} {'porous' if porous else 'solid'}")
        out.append(f"G0 Z{fx(z)} F{fx(spec.travel_feedrate)}")
        span = spec.width if along_y else spec.depth
        length = spec.depth if along_y else spec.width
        for i, off in enumerate(_line_offsets(span, pitch)):
            a, b = (0.0, length) if i % 2 == 0 else (length, 0.0)
            if along_y:
                start, end = (x0 + off, y0 + a), (x0 + off, y0 + b)
            else:
                start, end = (x0 + a, y0 + off), (x0 + b, y0 + off)
            de = filament_feed(layer, length)
            if spec.absolute_e:
                e_total = float(format_number(e_total + de, 5))
                e_word = format_number(e_total, 5)
            else:
                e_word = format_number(de, 5)
            out.append(f"G0 X{fx(start[0])} Y{fx(start[1])} F{fx(spec.travel_feedrate)}")
            out.append(f"G1 X{fx(end[0])} Y{fx(end[1])} E{e_word} F{fx(spec.print_feedrate)}")
    out.append(";end")
    return parse_document("\n".join(out) + "\n")
