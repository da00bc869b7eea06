"""Region-selective flow scaling and tool-change cleanup for parsed G-code.

Regions are open sets: a point exactly on a boundary is outside.  Moves
that cross a boundary are split into collinear ``G1`` pieces so that only
the part inside the region is rescaled; the XYZ path itself never changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

from porogen.errors import RegionError, ToolchangeError
from porogen.flow import FlowParams, Regime, line_width, parse_gamma
from porogen.gcode import (
    DEFAULT_ARC_TOLERANCE,
    GCodeDocument,
    GCodeLine,
    Interpreter,
    LineKind,
    MachineState,
    Mode,
    PrintMove,
    Vec3,
    build_line,
    format_number,
)

INF = math.inf


# --------------------------------------------------------------------------
# shapes

@dataclass(frozen=True)
class Box:
    min: Vec3
    max: Vec3

    def __post_init__(self) -> None:
        if not all(lo < hi for lo, hi in zip(self.min, self.max)):
            raise RegionError(f"box bounds must satisfy min < max on every axis: {self.min} {self.max}")

    @property
    def z_range(self) -> tuple[float, float]:
        return self.min[2], self.max[2]

    def contains(self, p: Vec3) -> bool:
        return all(lo < v < hi for v, lo, hi in zip(p, self.min, self.max))

    def interval(self, a: Vec3, b: Vec3) -> tuple[float, float] | None:
        return _slab_interval(a, b, self.min, self.max, axes=(0, 1, 2))


@dataclass(frozen=True)
class ZSlab:
    z_min: float
    z_max: float = INF

    def __post_init__(self) -> None:
        if not self.z_min < self.z_max:
            raise RegionError(f"slab needs z_min < z_max, got {self.z_min} .. {self.z_max}")

    @property
    def z_range(self) -> tuple[float, float]:
        return self.z_min, self.z_max

    def contains(self, p: Vec3) -> bool:
        return self.z_min < p[2] < self.z_max

    def interval(self, a: Vec3, b: Vec3) -> tuple[float, float] | None:
        return _slab_interval(a, b, (0, 0, self.z_min), (0, 0, self.z_max), axes=(2,))


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    z_min: float
    z_max: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise RegionError(f"cylinder radius must be positive, got {self.radius}")
        if not self.z_min < self.z_max:
            raise RegionError(f"cylinder needs z_min < z_max, got {self.z_min} .. {self.z_max}")

    @property
    def z_range(self) -> tuple[float, float]:
        return self.z_min, self.z_max

    def contains(self, p: Vec3) -> bool:
        dx, dy = p[0] - self.center[0], p[1] - self.center[1]
        return dx * dx + dy * dy < self.radius**2 and self.z_min < p[2] < self.z_max

    def interval(self, a: Vec3, b: Vec3) -> tuple[float, float] | None:
        zi = _slab_interval(a, b, (0, 0, self.z_min), (0, 0, self.z_max), axes=(2,))
        if zi is None:
            return None
        dx, dy = b[0] - a[0], b[1] - a[1]
        ox, oy = a[0] - self.center[0], a[1] - self.center[1]
        qa = dx * dx + dy * dy
        qc = ox * ox + oy * oy - self.radius**2
        if qa == 0:
            return zi if qc < 0 else None
        qb = 2 * (dx * ox + dy * oy)
        disc = qb * qb - 4 * qa * qc
        if disc <= 0:
            return None  # miss, or tangent (boundary only)
        sq = math.sqrt(disc)
        q = -0.5 * (qb + math.copysign(sq, qb))
        r1, r2 = q / qa, qc / q  # disc > 0 keeps q away from zero
        t0, t1 = max(zi[0], min(r1, r2)), min(zi[1], max(r1, r2))
        return (t0, t1) if t0 < t1 else None


Shape = Union[Box, ZSlab, Cylinder]


def _slab_interval(a: Vec3, b: Vec3, lo: Vec3, hi: Vec3, axes: Sequence[int]) -> tuple[float, float] | None:
    """Parameter range (t0, t1) within [0, 1] where a->b is strictly inside."""
    t0, t1 = 0.0, 1.0
    for k in axes:
        d = b[k] - a[k]
        if d == 0:
            if not lo[k] < a[k] < hi[k]:
                return None
            continue
        ta, tb = (lo[k] - a[k]) / d, (hi[k] - a[k]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return None
    return t0, t1


def _footprint_overlap(s1: Shape, s2: Shape) -> bool:
    if isinstance(s1, ZSlab) or isinstance(s2, ZSlab):
        return True
    if isinstance(s1, Box) and isinstance(s2, Box):
        return all(max(s1.min[k], s2.min[k]) < min(s1.max[k], s2.max[k]) for k in (0, 1))
    if isinstance(s1, Cylinder) and isinstance(s2, Cylinder):
        return math.dist(s1.center, s2.center) < s1.radius + s2.radius
    box, cyl = (s1, s2) if isinstance(s1, Box) else (s2, s1)
    cx = min(max(cyl.center[0], box.min[0]), box.max[0])
    cy = min(max(cyl.center[1], box.min[1]), box.max[1])
    return math.dist((cx, cy), cyl.center) < cyl.radius


def shapes_overlap(s1: Shape, s2: Shape) -> bool:
    (a0, a1), (b0, b1) = s1.z_range, s2.z_range
    return max(a0, b0) < min(a1, b1) and _footprint_overlap(s1, s2)


@dataclass(frozen=True)
class RegionSpec:
    shape: Shape
    target_gamma: float
    label: str = "region"
    feedrate_override: float | None = None

    def __post_init__(self) -> None:
        if not (0 < self.target_gamma <= 2):
            raise RegionError(f"region {self.label!r}: target flow must lie in (0, 2], got {self.target_gamma}")
        if self.feedrate_override is not None and not self.feedrate_override > 0:
            raise RegionError(f"region {self.label!r}: feedrate must be positive")


# --------------------------------------------------------------------------
# clipping

@dataclass(frozen=True)
class ClipPiece:
    start: Vec3
    end: Vec3
    t0: float
    t1: float
    delta_e: float
    inside: bool
    region: int | None = None  # index into the region list when inside

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


def _lerp(a: Vec3, b: Vec3, t: float) -> Vec3:
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return tuple(p + (q - p) * t for p, q in zip(a, b))


def _partition(move: PrintMove, intervals: list[tuple[float, float, int]]) -> list[ClipPiece]:
    pieces = []
    cursor = 0.0
    de = move.delta_e

    def add(t0: float, t1: float, region: int | None) -> None:
        e0 = de * t0
        e1 = de if t1 == 1.0 else de * t1
        pieces.append(ClipPiece(_lerp(move.start, move.end, t0), _lerp(move.start, move.end, t1),
                                t0, t1, e1 - e0, region is not None, region))

    for t0, t1, idx in sorted(intervals):
        if t0 > cursor:
            add(cursor, t0, None)
        add(t0, t1, idx)
        cursor = t1
    if cursor < 1.0:
        add(cursor, 1.0, None)
    return pieces


def partition_move(move: PrintMove, shapes: Sequence[Shape]) -> list[ClipPiece]:
    """Split ``move`` against several disjoint shapes."""
    if move.length == 0:
        for idx, shape in enumerate(shapes):
            if shape.contains(move.end):
                return [ClipPiece(move.start, move.end, 0.0, 1.0, move.delta_e, True, idx)]
        return [ClipPiece(move.start, move.end, 0.0, 1.0, move.delta_e, False, None)]
    intervals = []
    for idx, shape in enumerate(shapes):
        iv = shape.interval(move.start, move.end)
        if iv is not None:
            intervals.append((iv[0], iv[1], idx))
    return _partition(move, intervals)


def clip_move(move: PrintMove, shape: Shape) -> list[ClipPiece]:
    """Ordered maximal inside/outside pieces of ``move``; E is split by length."""
    return partition_move(move, [shape])


# --------------------------------------------------------------------------
# flow rewriting

@dataclass
class RegionStats:
    label: str
    target_gamma: float
    factor: float
    e_before: float = 0.0
    e_after: float = 0.0
    moves: int = 0
    predicted_width: float = 0.0
    regime: Regime = Regime.TRACE


@dataclass
class TransformReport:
    moves_modified: int = 0
    lines_split: int = 0
    toolchanges_removed: int = 0
    regions: list[RegionStats] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "moves_modified": self.moves_modified,
            "lines_split": self.lines_split,
            "toolchanges_removed": self.toolchanges_removed,
            "regions": [
                {
                    "label": r.label,
                    "target_gamma": r.target_gamma,
                    "scale_factor": r.factor,
                    "e_before_mm": round(r.e_before, 6),
                    "e_after_mm": round(r.e_after, 6),
                    "moves_modified": r.moves,
                    "predicted_width_mm": round(r.predicted_width, 6),
                    "regime": r.regime.value,
                }
                for r in self.regions
            ],
            "warnings": list(self.warnings),
        }


def check_overlaps(regions: Sequence[RegionSpec]) -> None:
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if shapes_overlap(a.shape, b.shape):
                raise RegionError(f"regions {a.label!r} and {b.label!r} overlap")


def _round5(x: float) -> float:
    return float(format_number(x, 5))


class _Rewriter:
    """Walks the input once, tracking input vs output extruder positions."""

    def __init__(self, doc: GCodeDocument, regions: Sequence[RegionSpec], source_gamma: float,
                 initial: MachineState, arc_tolerance: float) -> None:
        self.doc = doc
        self.regions = regions
        self.factors = [r.target_gamma / source_gamma for r in regions]
        # a region that neither rescales nor retimes is inert, keeping reruns byte-stable
        self.active = [
            not (f == 1.0 and r.feedrate_override is None) for f, r in zip(self.factors, regions)
        ]
        self.interp = Interpreter(initial.copy(), arc_tolerance)
        self.out_e = initial.e_axis
        # rounding residual per region (None = outside), so each total stays within 5e-6
        self.residual: dict[int | None, float] = {}
        self.out_feed = initial.feedrate
        self.stats = [RegionStats(r.label, r.target_gamma, f) for r, f in zip(regions, self.factors)]
        self.moves_modified = 0
        self.lines_split = 0

    # E bookkeeping -------------------------------------------------------
    def _emit_e(self, delta: float, region: int | None, relative: bool) -> float:
        """E word for an exact output increment ``delta``, diffusing rounding error per region."""
        target = delta + self.residual.get(region, 0.0)
        step = _round5(target)
        self.residual[region] = target - step
        if relative:
            self.out_e += step
            return step
        self.out_e = _round5(self.out_e + step)
        return self.out_e

    def run(self) -> GCodeDocument:
        shapes = [r.shape for r in self.regions]
        replacements: dict[int, list[GCodeLine]] = {}
        for i, line in enumerate(self.doc.lines):
            before = self.interp.state.copy()
            moves = self.interp.step(i, line)
            after = self.interp.state
            if line.kind is LineKind.SET_POSITION:
                if line.has("E") or not any(line.has(a) for a in "XYZ"):
                    self.out_e = after.e_axis
                continue
            if line.command not in ("G0", "G1", "G2", "G3"):
                continue
            if not moves:
                if line.has("F"):
                    self.out_feed = after.feedrate
                continue
            new = self._motion(i, line, moves, before, after, shapes)
            if new is not None:
                replacements[i] = new
        return self.doc.splice(replacements)

    def _motion(self, index: int, line: GCodeLine, moves: list[PrintMove], before: MachineState,
                after: MachineState, shapes: list[Shape]) -> list[GCodeLine] | None:
        relative = before.e_relative
        pieces_per_move = []
        touched = False
        for m in moves:
            if m.is_deposition:
                pieces = [p if (p.inside and self.active[p.region]) else _outside(p)
                          for p in partition_move(m, shapes)]
            else:
                # travel, retraction and zero-length primes are never rescaled
                pieces = [ClipPiece(m.start, m.end, 0.0, 1.0, m.delta_e, False, None)]
            touched |= any(p.inside for p in pieces)
            pieces_per_move.append(pieces)

        need_feed = after.feedrate
        if not touched:
            updates: dict[str, float] = {}
            if line.has("E"):
                if relative:
                    self.out_e += after.e_axis - before.e_axis
                else:
                    offset = self.out_e - before.e_axis
                    if abs(offset) >= 5e-6:
                        updates["E"] = _round5(after.e_axis + offset)
                        self.out_e = updates["E"]
                    else:
                        self.out_e = after.e_axis
            if not line.has("F") and self.out_feed != need_feed:
                updates["F"] = need_feed
            self.out_feed = need_feed
            return [line.with_values(updates, index + 1)] if updates else None

        self.moves_modified += sum(any(p.inside for p in ps) for ps in pieces_per_move)
        for ps in pieces_per_move:
            seen = set()
            for p in ps:
                if p.inside and p.region not in seen:
                    self.stats[p.region].moves += 1
                    seen.add(p.region)

        whole = [p for ps in pieces_per_move for p in ps]
        single_region = {p.region for p in whole}
        fully_inside = len(single_region) == 1 and all(p.inside for p in whole)
        if fully_inside:
            rid = whole[0].region
            spec = self.regions[rid]
            delta_in = after.e_axis - before.e_axis
            out_before = self.out_e
            value = self._emit_e(delta_in * self.factors[rid], rid, relative)
            st = self.stats[rid]
            st.e_before += delta_in
            st.e_after += self.out_e - out_before
            updates = {"E": value}
            feed = spec.feedrate_override or need_feed
            if spec.feedrate_override is not None or (not line.has("F") and self.out_feed != feed):
                updates["F"] = feed
            self.out_feed = feed
            return [line.with_values(updates, index + 1)]

        return self._split(index, line, whole, before, need_feed)

    def _split(self, index: int, line: GCodeLine, pieces: list[ClipPiece], before: MachineState,
               need_feed: float) -> list[GCodeLine]:
        self.lines_split += 1
        relative_xyz = before.xyz_mode is Mode.RELATIVE
        relative_e = before.e_relative
        axes = [a for a in "XYZ" if line.has(a)]
        if line.command in ("G2", "G3"):
            axes = ["X", "Y"] + (["Z"] if pieces[0].start[2] != pieces[-1].end[2] else [])
        written = list(before.position)  # cursor for relative XYZ offsets
        out: list[GCodeLine] = []
        eol_mid = b"\r\n" if line.eol == b"\r\n" else b"\n"
        for n, p in enumerate(pieces):
            last = n == len(pieces) - 1
            params: list[tuple[str, float | str]] = []
            for a in axes:
                k = "XYZ".index(a)
                if relative_xyz:
                    offset = _round_axis(p.end[k] - written[k])
                    written[k] += offset
                    params.append((a, offset))
                elif last and line.has(a):
                    params.append((a, line.get(a).text))
                else:
                    params.append((a, p.end[k]))
            if p.delta_e != 0:
                out_before = self.out_e
                factor = self.factors[p.region] if p.inside else 1.0
                params.append(("E", self._emit_e(p.delta_e * factor, p.region, relative_e)))
                if p.inside:
                    st = self.stats[p.region]
                    st.e_before += p.delta_e
                    st.e_after += self.out_e - out_before
            feed = need_feed
            if p.inside and self.regions[p.region].feedrate_override is not None:
                feed = self.regions[p.region].feedrate_override
            if feed != self.out_feed:
                params.append(("F", feed))
                self.out_feed = feed
            tag = f"porogen:{self.regions[p.region].label}" if p.inside else "porogen:outside"
            if n == 0 and line.comment is not None and line.comment.strip():
                tag += " " + line.comment.strip()
            out.append(build_line("G1", params, tag, line.eol if last else eol_mid))
        return out


def _round_axis(x: float) -> float:
    return float(format_number(x, 3))


def _outside(p: ClipPiece) -> ClipPiece:
    return ClipPiece(p.start, p.end, p.t0, p.t1, p.delta_e, False, None)


def apply_regions(doc: GCodeDocument, regions: Sequence[RegionSpec], source_gamma: float = 1.0,
                  params: FlowParams | None = None, initial: MachineState | None = None,
                  arc_tolerance: float = DEFAULT_ARC_TOLERANCE) -> tuple[GCodeDocument, TransformReport]:
    """Rescale extrusion inside ``regions`` by ``target_gamma / source_gamma``.

    ``source_gamma`` is the flow fraction already baked into ``doc``.
    Retractions and zero-length primes are left alone.  With absolute E
    (M82) every later E word is shifted so downstream moves keep their
    original per-move extrusion.
    """
    if not (0 < source_gamma <= 2):
        raise RegionError(f"source flow must lie in (0, 2], got {source_gamma}")
    params = params or FlowParams()
    check_overlaps(regions)
    rw = _Rewriter(doc, regions, source_gamma, initial or MachineState(), arc_tolerance)
    out = rw.run()
    report = TransformReport(moves_modified=rw.moves_modified, lines_split=rw.lines_split)
    for spec, st in zip(regions, rw.stats):
        st.predicted_width, st.regime = line_width(params.with_gamma(spec.target_gamma))
        report.regions.append(st)
        if st.moves == 0:
            report.warnings.append(f"region {spec.label!r} does not intersect any extrusion")
    return out, report


# --------------------------------------------------------------------------
# tool changes

def remove_redundant_toolchanges(doc: GCodeDocument, tool_alias: Mapping[int, int] | None = None,
                                 block_start: str = "TOOLCHANGE START",
                                 block_end: str = "TOOLCHANGE END") -> tuple[GCodeDocument, int]:
    """Drop ``T<n>`` commands that select the extruder already in use.

    ``tool_alias`` maps virtual tool numbers to physical extruders (identity
    when omitted).  When the redundant ``T`` sits between comment lines
    ``;<block_start>`` and ``;<block_end>`` the whole block, markers
    included, is removed with it.  The first tool selection is always kept
    because the extruder in use at program start is unknown.
    """
    start_key, end_key = block_start.strip().casefold(), block_end.strip().casefold()

    def marker(line: GCodeLine) -> str | None:
        if line.comment is None:
            return None
        text = line.comment.strip().casefold()
        return text if text in (start_key, end_key) else None

    lines = doc.lines
    drop: set[int] = set()
    active: int | None = None
    block_open: int | None = None
    count = 0
    for i, line in enumerate(lines):
        tag = marker(line)
        if tag == start_key:
            block_open = i
        elif tag == end_key:
            block_open = None
        if line.kind is not LineKind.TOOL_CHANGE:
            continue
        tool = int(line.command[1:].split(".")[0])
        if tool_alias is None:
            physical = tool
        elif tool in tool_alias:
            physical = tool_alias[tool]
        else:
            raise ToolchangeError(
                f"line {i + 1}: tool T{tool} has no physical extruder mapping"
                f" ({line.raw.decode('utf-8', 'replace')!r})"
            )
        if physical != active:
            active = physical
            continue
        count += 1
        end = None
        if block_open is not None:
            end = next((j for j in range(i + 1, len(lines)) if marker(lines[j]) == end_key), None)
        if end is None:
            drop.add(i)
        else:
            drop.update(range(block_open, end + 1))
    if not drop:
        return doc, 0
    return GCodeDocument(tuple(l for i, l in enumerate(lines) if i not in drop), doc.dialect), count


# --------------------------------------------------------------------------
# region files

def region_from_mapping(entry: Mapping) -> RegionSpec:
    try:
        kind = str(entry["shape"]).lower()
        label = str(entry.get("label", kind))
        if "gamma" not in entry:
            raise RegionError(f"region {label!r}: missing 'gamma'")
        gamma = parse_gamma(entry["gamma"])
        feed = entry.get("feedrate")
        if kind in ("box", "axis_aligned_box"):
            shape: Shape = Box(tuple(map(float, entry["min"])), tuple(map(float, entry["max"])))
        elif kind in ("zslab", "z_slab", "slab"):
            shape = ZSlab(float(entry.get("z_min", -INF)), float(entry.get("z_max", INF)))
        elif kind == "cylinder":
            shape = Cylinder(tuple(map(float, entry["center"])), float(entry["radius"]),
                             float(entry.get("z_min", -INF)), float(entry.get("z_max", INF)))
        else:
            raise RegionError(f"region {label!r}: unknown shape {kind!r}")
    except KeyError as exc:
        raise RegionError(f"region entry is missing key {exc.args[0]!r}: {dict(entry)}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, RegionError):
            raise
        raise RegionError(f"bad region entry {dict(entry)}: {exc}") from None
    return RegionSpec(shape, gamma, label, None if feed is None else float(feed))


def load_regions(path: str | Path) -> list[RegionSpec]:
    """Read ``[[region]]`` tables from a TOML file."""
    from porogen.config import load_toml

    data = load_toml(path)
    entries = data.get("region", [])
    if not isinstance(entries, list):
        raise RegionError(f"{path}: 'region' must be an array of tables ([[region]])")
    regions = [region_from_mapping(e) for e in entries]
    labels = [r.label for r in regions]
    dup = {l for l in labels if labels.count(l) > 1}
    if dup:
        raise RegionError(f"{path}: duplicate region labels {sorted(dup)}")
    return regions
