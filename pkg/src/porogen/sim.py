"""Per-layer deposition rasters and porosity measurements.

Every extruding move is swept as a 2-D capsule (a segment thickened by
half its bead width) onto a boolean occupancy grid; a cell is filled when
its centre lies inside the capsule.  Bead widths come from the extrusion
model, using the filament actually fed over each move.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from porogen.errors import SimulationError
from porogen.flow import FlowParams, width_from_feed
from porogen.gcode import PrintMove

DEFAULT_RESOLUTION = 0.01  # mm per cell


@dataclass
class LayerRaster:
    z: float
    resolution: float
    origin: tuple[float, float]  # lower-left corner of cell (0, 0)
    occupancy: np.ndarray  # bool, shape (rows along y, columns along x)
    widths: list[float] = field(default_factory=list)
    lengths: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    @property
    def filled_cells(self) -> int:
        return int(self.occupancy.sum())

    @property
    def total_cells(self) -> int:
        return int(self.occupancy.size)

    @property
    def empty_cells(self) -> int:
        return self.total_cells - self.filled_cells

    @property
    def filled_area(self) -> float:
        return self.filled_cells * self.resolution**2

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        ny, nx = self.occupancy.shape
        x0, y0 = self.origin
        return x0, y0, x0 + nx * self.resolution, y0 + ny * self.resolution

    def mean_width(self) -> float | None:
        """Length-weighted mean bead width of the stamped moves."""
        total = sum(self.lengths)
        if total == 0:
            return None
        return sum(w * l for w, l in zip(self.widths, self.lengths)) / total


@dataclass(frozen=True)
class Rect:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise SimulationError(f"degenerate query rectangle {self}")


def move_width(move: PrintMove, params: FlowParams) -> float:
    return width_from_feed(move.delta_e, move.length, params.filament_diameter, params.layer_height)


def stamp_layer(moves: Sequence[PrintMove], widths: Sequence[float | None], resolution: float,
                z: float | None = None) -> LayerRaster:
    """Rasterize the extruding moves of one layer.

    ``widths[i]`` is the bead width of ``moves[i]``; it is ignored for
    travel and retraction moves, which stamp nothing.
    """
    if not resolution > 0:
        raise SimulationError("resolution must be positive")
    segs = [(m, w) for m, w in zip(moves, widths) if m.is_deposition]
    if z is None:
        z = moves[0].end[2] if moves else 0.0
    if not segs:
        return LayerRaster(z, resolution, (0.0, 0.0), np.zeros((0, 0), dtype=bool))
    narrowest = min(w for _, w in segs)
    if not narrowest > 0:
        raise SimulationError(f"non-positive bead width {narrowest:g} mm")
    if resolution > narrowest / 4:
        raise SimulationError(
            f"resolution too coarse to resolve fibers: {resolution:g} mm cells for a"
            f" {narrowest:.4f} mm bead (need <= {narrowest / 4:.4f} mm)"
        )
    margin = max(w for _, w in segs)
    xs = [c for m, _ in segs for c in (m.start[0], m.end[0])]
    ys = [c for m, _ in segs for c in (m.start[1], m.end[1])]
    # snap to the global lattice so rasters at one resolution line up
    j0 = math.floor((min(xs) - margin) / resolution)
    i0 = math.floor((min(ys) - margin) / resolution)
    nx = math.ceil((max(xs) + margin) / resolution) - j0
    ny = math.ceil((max(ys) + margin) / resolution) - i0
    origin = (j0 * resolution, i0 * resolution)
    occ = np.zeros((ny, nx), dtype=bool)
    for m, w in segs:
        _stamp_capsule(occ, origin, resolution, m.start[:2], m.end[:2], w / 2)
    return LayerRaster(z, resolution, origin, occ, [w for _, w in segs], [m.length for m, _ in segs])


def _stamp_capsule(occ: np.ndarray, origin: tuple[float, float], res: float,
                   a: tuple[float, float], b: tuple[float, float], radius: float) -> None:
    ny, nx = occ.shape
    ox, oy = origin
    lo_x, hi_x = min(a[0], b[0]) - radius, max(a[0], b[0]) + radius
    lo_y, hi_y = min(a[1], b[1]) - radius, max(a[1], b[1]) + radius
    j_lo = max(0, math.floor((lo_x - ox) / res - 0.5))
    j_hi = min(nx, math.ceil((hi_x - ox) / res - 0.5) + 1)
    i_lo = max(0, math.floor((lo_y - oy) / res - 0.5))
    i_hi = min(ny, math.ceil((hi_y - oy) / res - 0.5) + 1)
    if j_lo >= j_hi or i_lo >= i_hi:
        return
    cx = ox + (np.arange(j_lo, j_hi) + 0.5) * res
    cy = oy + (np.arange(i_lo, i_hi) + 0.5) * res
    dx, dy = b[0] - a[0], b[1] - a[1]
    px = cx[None, :] - a[0]
    py = cy[:, None] - a[1]
    l2 = dx * dx + dy * dy
    if l2 == 0:
        d2 = px * px + py * py
    else:
        t = np.clip((px * dx + py * dy) / l2, 0.0, 1.0)
        ex = px - t * dx
        ey = py - t * dy
        d2 = ex * ex + ey * ey
    occ[i_lo:i_hi, j_lo:j_hi] |= d2 <= radius * radius


def _index_range(lo: float, hi: float, origin: float, res: float) -> tuple[int, int]:
    """Half-open index range of cells whose centres lie in [lo, hi]."""
    first = math.ceil((lo - origin) / res - 0.5 - 1e-9)
    last = math.floor((hi - origin) / res - 0.5 + 1e-9)
    return first, last + 1


def porosity(raster: LayerRaster, region: Rect) -> float:
    """Empty fraction of the cells whose centres fall inside ``region``.

    Cells of the region beyond the raster's extent count as empty.  A
    raster with nothing stamped is fully porous everywhere.
    """
    ny, nx = raster.occupancy.shape
    if raster.occupancy.size == 0:
        return 1.0
    bx0, by0, bx1, by1 = raster.bounds
    if region.x_max <= bx0 or region.x_min >= bx1 or region.y_max <= by0 or region.y_min >= by1:
        raise SimulationError(f"query region {region} lies outside the raster {raster.bounds}")
    res = raster.resolution
    j0, j1 = _index_range(region.x_min, region.x_max, raster.origin[0], res)
    i0, i1 = _index_range(region.y_min, region.y_max, raster.origin[1], res)
    total = max(0, j1 - j0) * max(0, i1 - i0)
    if total == 0:
        raise SimulationError(f"query region {region} contains no cell centres")
    filled = raster.occupancy[max(i0, 0):min(i1, ny), max(j0, 0):min(j1, nx)].sum()
    return float(1.0 - filled / total)


# --------------------------------------------------------------------------
# fibre width probes

@dataclass(frozen=True)
class Probe:
    """A scanline running along ``axis`` at ``at`` (the other coordinate), from ``lo`` to ``hi``."""

    axis: str  # "x" or "y"
    at: float
    lo: float
    hi: float


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate(([False], row, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def measure_fiber_width(raster: LayerRaster, probes: Iterable[Probe], fiber_axis: str) -> float:
    """Mean chord of filled runs crossed by scanlines perpendicular to the fibres.

    Runs cut off by the end of a probe are not complete crossings and are
    skipped; so are probes that hit nothing.
    """
    if fiber_axis not in ("x", "y"):
        raise SimulationError(f"fiber axis must be 'x' or 'y', got {fiber_axis!r}")
    ny, nx = raster.occupancy.shape
    res = raster.resolution
    ox, oy = raster.origin
    chords: list[float] = []
    for probe in probes:
        if probe.axis == fiber_axis:
            raise SimulationError(f"probe {probe} runs parallel to the fibers; probes must cross them")
        if probe.axis == "x":
            i = math.floor((probe.at - oy) / res)
            if not 0 <= i < ny:
                continue
            k0, k1 = _index_range(probe.lo, probe.hi, ox, res)
            k0, k1 = max(k0, 0), min(k1, nx)
            line = raster.occupancy[i, k0:k1]
        else:
            j = math.floor((probe.at - ox) / res)
            if not 0 <= j < nx:
                continue
            k0, k1 = _index_range(probe.lo, probe.hi, oy, res)
            k0, k1 = max(k0, 0), min(k1, ny)
            line = raster.occupancy[k0:k1, j]
        for s, e in _runs(line):
            if s == 0 or e == len(line):
                continue
            chords.append((e - s) * res)
    if not chords:
        raise SimulationError("no probe crossed a complete fiber")
    return float(np.mean(chords))


# --------------------------------------------------------------------------
# whole-toolpath simulation

@dataclass(frozen=True)
class LayerPorosity:
    index: int
    z: float
    porosity: float
    mean_width: float | None
    mean_gamma: float | None
    filled_cells: int
    total_cells: int


@dataclass
class PorosityReport:
    resolution: float
    region: Rect | None
    layers: list[LayerPorosity]

    def by_gamma(self) -> dict[float, float]:
        """Mean porosity of layers grouped by their (rounded) effective flow."""
        groups: dict[float, list[float]] = {}
        for layer in self.layers:
            if layer.mean_gamma is not None:
                groups.setdefault(round(layer.mean_gamma, 3), []).append(layer.porosity)
        return {g: sum(v) / len(v) for g, v in sorted(groups.items())}

    def to_dict(self) -> dict:
        return {
            "resolution_mm": self.resolution,
            "region": None if self.region is None else [self.region.x_min, self.region.y_min,
                                                         self.region.x_max, self.region.y_max],
            "layers": [
                {
                    "index": l.index,
                    "z_mm": l.z,
                    "porosity": round(l.porosity, 9),
                    "mean_width_mm": None if l.mean_width is None else round(l.mean_width, 9),
                    "mean_gamma": None if l.mean_gamma is None else round(l.mean_gamma, 9),
                    "filled_cells": l.filled_cells,
                    "total_cells": l.total_cells,
                }
                for l in self.layers
            ],
            "porosity_by_gamma": {f"{g:g}": round(p, 9) for g, p in self.by_gamma().items()},
        }


def group_layers(moves: Iterable[PrintMove], z_range: tuple[float, float] | None = None
                 ) -> list[tuple[float, list[PrintMove]]]:
    """Moves bucketed by the z they end at, in ascending z."""
    layers: dict[float, list[PrintMove]] = {}
    for m in moves:
        z = round(m.end[2], 6)
        if z_range is not None and not (z_range[0] <= z <= z_range[1]):
            continue
        layers.setdefault(z, []).append(m)
    return sorted(layers.items())


def simulate(moves: Sequence[PrintMove], params: FlowParams, resolution: float = DEFAULT_RESOLUTION,
             z_range: tuple[float, float] | None = None, workers: int = 1) -> list[LayerRaster]:
    """One raster per layer; layers are independent and may run in parallel."""
    layers = group_layers(moves, z_range)

    def work(item: tuple[float, list[PrintMove]]) -> LayerRaster:
        z, layer_moves = item
        widths = [move_width(m, params) if m.is_deposition else None for m in layer_moves]
        return stamp_layer(layer_moves, widths, resolution, z)

    if workers > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, layers))  # map keeps layer order
    return [work(item) for item in layers]


def porosity_report(rasters: Sequence[LayerRaster], params: FlowParams, region: Rect | None = None
                    ) -> PorosityReport:
    rows = []
    for k, r in enumerate(rasters):
        query = region
        if query is None and r.occupancy.size:
            query = Rect(*r.bounds)
        if query is None:
            p, filled, total = 1.0, 0, 0
        elif r.occupancy.size == 0:
            p, filled, total = 1.0, 0, 0
        else:
            p = porosity(r, query)
            filled, total = r.filled_cells, r.total_cells
        gamma = None
        if r.lengths:
            feed_area = sum(_gamma_from_width(w, params) * l for w, l in zip(r.widths, r.lengths))
            gamma = feed_area / sum(r.lengths)
        rows.append(LayerPorosity(k, r.z, p, r.mean_width(), gamma, filled, total))
    return PorosityReport(rasters[0].resolution if rasters else 0.0, region, rows)


def _gamma_from_width(width: float, params: FlowParams) -> float:
    return (width + params.layer_height * (math.pi / 4 - 1)) / params.nominal_width


# --------------------------------------------------------------------------
# export

def export_raster(raster: LayerRaster, fmt: str, path: str | Path | None = None) -> bytes:
    """Serialize the occupancy grid as binary PGM (``P5``) or CSV.

    Rows are written top-down (highest y first) so images look like a
    plan view.  Filled cells are 255 / ``1``.
    """
    grid = raster.occupancy[::-1]
    if fmt == "pgm":
        ny, nx = grid.shape
        data = f"P5\n{nx} {ny}\n255\n".encode("ascii") + (grid.astype(np.uint8) * 255).tobytes()
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in grid.astype(np.uint8):
            writer.writerow(row.tolist())
        data = buf.getvalue().encode("ascii")
    else:
        raise SimulationError(f"unsupported raster format {fmt!r} (use 'pgm' or 'csv')")
    if path is not None:
        Path(path).write_bytes(data)
    return data
