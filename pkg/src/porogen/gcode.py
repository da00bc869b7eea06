"""Lossless G-code parsing, serialization and kinematic replay.

Only the Marlin flavour is understood: ``;`` comments, ``N`` line numbers
and ``*`` checksums (kept in the raw text, ignored semantically).  Every
parsed line keeps its original bytes, so a document that was not modified
serializes back to exactly the bytes it was read from.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from porogen.errors import GCodeParseError, ReplayError

DEFAULT_ARC_TOLERANCE = 0.01  # mm of chordal deviation

# decimals used when a word is (re)written by porogen
CANONICAL_DECIMALS = {"E": 5, "X": 3, "Y": 3, "Z": 3, "F": 3, "I": 3, "J": 3, "R": 3}

# M-codes whose argument is free text rather than words
_STRING_ARG_MCODES = {16, 23, 28, 30, 32, 33, 117, 118, 928}

_TOKEN_RE = re.compile(rb"\S+")
_WORD_RE = re.compile(rb"([A-Za-z])([+-]?(?:\d+(?:\.\d*)?|\.\d+))")
_TOKEN_FULL_RE = re.compile(rb"(?:[A-Za-z][+-]?(?:\d+(?:\.\d*)?|\.\d+))+")


class LineKind(Enum):
    MOTION = "motion"
    MODE = "mode"
    TOOL_CHANGE = "tool_change"
    SET_POSITION = "set_position"
    OTHER = "other"
    BLANK = "blank"
    COMMENT_ONLY = "comment_only"


class Mode(Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


@dataclass(frozen=True)
class Word:
    letter: str
    text: str
    value: float
    start: int  # byte offset of the letter inside GCodeLine.raw
    end: int


def format_number(value: float, decimals: int) -> str:
    """Fixed-point text with trailing zeros trimmed (``0.50000`` -> ``0.5``)."""
    text = f"{value:.{decimals}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return text


def format_word(letter: str, value: float) -> str:
    return letter + format_number(value, CANONICAL_DECIMALS.get(letter, 5))


def _command_name(word: Word) -> str:
    if word.value == int(word.value):
        return f"{word.letter}{int(word.value)}"
    return f"{word.letter}{word.text}"


def _classify(command: str | None, has_words: bool, comment: str | None) -> LineKind:
    if not has_words:
        return LineKind.BLANK if comment is None else LineKind.COMMENT_ONLY
    if command in ("G0", "G1", "G2", "G3"):
        return LineKind.MOTION
    if command in ("G90", "G91", "M82", "M83"):
        return LineKind.MODE
    if command == "G92":
        return LineKind.SET_POSITION
    if command is not None and command.startswith("T"):
        return LineKind.TOOL_CHANGE
    return LineKind.OTHER


@dataclass(frozen=True)
class GCodeLine:
    raw: bytes
    words: tuple[Word, ...] = ()
    comment: str | None = None
    kind: LineKind = LineKind.BLANK
    eol: bytes = b"\n"

    @property
    def command(self) -> str | None:
        """``G1``, ``M104``, ``T0``... or None when the line carries no command."""
        for w in self.words:
            if w.letter in "GMT":
                return _command_name(w)
        return None

    def _params(self) -> Iterator[Word]:
        seen_command = False
        for w in self.words:
            if not seen_command and w.letter in "GMT":
                seen_command = True
                continue
            yield w

    def get(self, letter: str) -> Word | None:
        for w in self._params():
            if w.letter == letter:
                return w
        return None

    def value(self, letter: str, default: float | None = None) -> float | None:
        w = self.get(letter)
        return default if w is None else w.value

    def has(self, letter: str) -> bool:
        return self.get(letter) is not None

    def serialize(self) -> bytes:
        return self.raw + self.eol

    def with_values(self, updates: Mapping[str, float], lineno: int = 0) -> GCodeLine:
        """Rewrite (or append) parameter words in canonical format.

        Everything else on the line, including spacing and the comment, is
        kept byte for byte.  A ``*`` checksum is recomputed if present.
        """
        raw = self.raw
        missing = []
        spans = []
        for letter, value in updates.items():
            w = self.get(letter)
            text = format_word(letter, value).encode("ascii")
            if w is None:
                missing.append(text)
            else:
                spans.append((w.start, w.end, text))
        for start, end, text in sorted(spans, reverse=True):
            raw = raw[:start] + text + raw[end:]
        if missing:
            tmp = parse_line(raw, lineno)
            last = max((w.end for w in tmp.words), default=0)
            raw = raw[:last] + b"".join(b" " + t for t in missing) + raw[last:]
        if b"*" in raw.split(b";", 1)[0]:
            raw = _refresh_checksum(raw)
        return parse_line(raw, lineno, self.eol)


def _refresh_checksum(raw: bytes) -> bytes:
    semi = raw.find(b";")
    code, rest = (raw, b"") if semi < 0 else (raw[:semi], raw[semi:])
    star = code.rfind(b"*")
    body = code[:star]
    m = re.match(rb"\*\s*\d*", code[star:])
    tail = code[star + m.end():]
    cs = 0
    for b in body:
        cs ^= b
    return body + b"*" + str(cs).encode() + tail + rest


def build_line(command: str, params: Iterable[tuple[str, float | str]], comment: str | None = None,
               eol: bytes = b"\n") -> GCodeLine:
    """Create a fresh line in canonical formatting.

    A ``str`` parameter value is written verbatim (used to carry over a
    word's original text).
    """
    parts = [command] + [
        letter + value if isinstance(value, str) else format_word(letter, value)
        for letter, value in params
    ]
    text = " ".join(parts)
    if comment is not None:
        text += " ;" + comment
    return parse_line(text.encode("utf-8"), 0, eol)


def parse_line(raw: bytes, lineno: int = 1, eol: bytes = b"\n") -> GCodeLine:
    semi = raw.find(b";")
    if semi >= 0:
        code = raw[:semi]
        comment = raw[semi + 1:].decode("utf-8", errors="replace")
    else:
        code = raw
        comment = None
    if b"*" in code:
        code = code[: code.rfind(b"*")]

    words: list[Word] = []
    for tok in _TOKEN_RE.finditer(code):
        token = tok.group()
        if len(token) == 1 and token.isalpha():
            # bare axis letter as in "G28 X Y"; Marlin reads the missing number as 0
            words.append(Word(token.decode("ascii").upper(), "", 0.0, tok.start(), tok.end()))
            continue
        if _TOKEN_FULL_RE.fullmatch(token) is None:
            raise GCodeParseError(
                f"invalid word {token.decode('latin-1')!r}", lineno, tok.start() + 1
            )
        for m in _WORD_RE.finditer(token):
            text = m.group(2).decode("ascii")
            words.append(
                Word(
                    letter=m.group(1).decode("ascii").upper(),
                    text=text,
                    value=float(text),
                    start=tok.start() + m.start(),
                    end=tok.start() + m.end(),
                )
            )
        cmd = [w for w in words if w.letter != "N"]
        if len(cmd) == 1 and cmd[0].letter == "M" and cmd[0].value in _STRING_ARG_MCODES:
            break  # rest of the line is a free-text argument

    line = GCodeLine(raw=raw, words=tuple(words), comment=comment, eol=eol)
    return replace(line, kind=_classify(line.command, bool(words), comment))


@dataclass(frozen=True)
class GCodeDocument:
    lines: tuple[GCodeLine, ...] = ()
    dialect: str = "marlin"

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self) -> Iterator[GCodeLine]:
        return iter(self.lines)

    def __getitem__(self, index: int) -> GCodeLine:
        return self.lines[index]

    def serialize(self) -> bytes:
        return serialize_document(self)

    def splice(self, replacements: Mapping[int, list[GCodeLine]]) -> GCodeDocument:
        """Return a copy where line ``i`` is replaced by ``replacements[i]``."""
        out: list[GCodeLine] = []
        for i, line in enumerate(self.lines):
            if i in replacements:
                out.extend(replacements[i])
            else:
                out.append(line)
        return GCodeDocument(tuple(out), self.dialect)


def parse_document(data: bytes | str) -> GCodeDocument:
    """Parse a whole program.  LF and CRLF terminators are both preserved."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if not data:
        return GCodeDocument()
    chunks = data.split(b"\n")
    last = chunks.pop()
    lines = []
    for n, chunk in enumerate(chunks, start=1):
        if chunk.endswith(b"\r"):
            lines.append(parse_line(chunk[:-1], n, b"\r\n"))
        else:
            lines.append(parse_line(chunk, n, b"\n"))
    if last:
        lines.append(parse_line(last, len(chunks) + 1, b""))
    return GCodeDocument(tuple(lines))


def serialize_document(doc: GCodeDocument) -> bytes:
    return b"".join(line.raw + line.eol for line in doc.lines)


def read_document(path: str | Path) -> GCodeDocument:
    return parse_document(Path(path).read_bytes())


# --------------------------------------------------------------------------
# replay

Vec3 = tuple[float, float, float]


@dataclass
class MachineState:
    position: Vec3 = (0.0, 0.0, 0.0)
    e_axis: float = 0.0
    feedrate: float | None = None  # mm/min
    xyz_mode: Mode = Mode.ABSOLUTE
    e_mode: Mode = Mode.ABSOLUTE
    active_tool: int = 0

    @property
    def e_relative(self) -> bool:
        # Marlin: G91 makes E relative too, M83 keeps it relative under G90
        return self.e_mode is Mode.RELATIVE or self.xyz_mode is Mode.RELATIVE

    def copy(self) -> MachineState:
        return replace(self)


@dataclass(frozen=True)
class PrintMove:
    start: Vec3
    end: Vec3
    delta_e: float
    feedrate: float
    source_line: int
    tool: int
    arc: bool = False

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    @property
    def is_deposition(self) -> bool:
        return self.delta_e > 0 and self.length > 0

    @property
    def is_travel(self) -> bool:
        return self.delta_e == 0


@dataclass
class Interpreter:
    """Incremental Marlin interpreter; feed it lines in order with :meth:`step`."""

    state: MachineState = field(default_factory=MachineState)
    arc_tolerance: float = DEFAULT_ARC_TOLERANCE

    def step(self, index: int, line: GCodeLine) -> list[PrintMove]:
        cmd = line.command
        if cmd is None:
            return []
        s = self.state
        if cmd in ("G0", "G1"):
            return self._linear(index, line)
        if cmd in ("G2", "G3"):
            return self._arc(index, line, clockwise=cmd == "G2")
        if cmd == "G90":
            s.xyz_mode = Mode.ABSOLUTE
        elif cmd == "G91":
            s.xyz_mode = Mode.RELATIVE
        elif cmd == "M82":
            s.e_mode = Mode.ABSOLUTE
        elif cmd == "M83":
            s.e_mode = Mode.RELATIVE
        elif cmd == "G92":
            self._set_position(line)
        elif cmd == "G28":
            axes = [a for a in "XYZ" if line.has(a)] or ["X", "Y", "Z"]
            s.position = tuple(0.0 if a in axes else p for a, p in zip("XYZ", s.position))
        elif cmd.startswith("T"):
            s.active_tool = int(cmd[1:].split(".")[0])
        return []

    def _set_position(self, line: GCodeLine) -> None:
        s = self.state
        if not any(line.has(a) for a in "XYZE"):
            s.position = (0.0, 0.0, 0.0)
            s.e_axis = 0.0
            return
        s.position = tuple(
            line.value(a) if line.has(a) else p for a, p in zip("XYZ", s.position)
        )
        if line.has("E"):
            s.e_axis = line.value("E")

    def _update_feedrate(self, index: int, line: GCodeLine) -> None:
        f = line.value("F")
        if f is not None:
            if not f > 0:
                raise ReplayError(f"non-positive feedrate F{f:g}", index)
            self.state.feedrate = f

    def _targets(self, line: GCodeLine) -> tuple[Vec3, float]:
        s = self.state
        rel = s.xyz_mode is Mode.RELATIVE
        target = tuple(
            (p + line.value(a) if rel else line.value(a)) if line.has(a) else p
            for a, p in zip("XYZ", s.position)
        )
        e = s.e_axis
        if line.has("E"):
            e = s.e_axis + line.value("E") if s.e_relative else line.value("E")
        return target, e

    def _linear(self, index: int, line: GCodeLine) -> list[PrintMove]:
        s = self.state
        self._update_feedrate(index, line)
        if not any(line.has(a) for a in "XYZE"):
            return []
        if s.feedrate is None:
            raise ReplayError("motion before any feedrate was set", index)
        target, e = self._targets(line)
        move = PrintMove(s.position, target, e - s.e_axis, s.feedrate, index, s.active_tool)
        s.position, s.e_axis = target, e
        return [move]

    def _arc(self, index: int, line: GCodeLine, clockwise: bool) -> list[PrintMove]:
        s = self.state
        self._update_feedrate(index, line)
        if s.feedrate is None:
            raise ReplayError("motion before any feedrate was set", index)
        start = s.position
        target, e = self._targets(line)
        center = arc_center(start, target, line, clockwise)
        if center is None:
            raise ReplayError("arc without a resolvable center (need I/J or R)", index)
        points = linearize_arc(start, target, center, clockwise, self.arc_tolerance)
        n = len(points)
        moves = []
        prev, e_prev = start, s.e_axis
        for k, p in enumerate(points, start=1):
            ek = e if k == n else s.e_axis + (e - s.e_axis) * k / n
            moves.append(PrintMove(prev, p, ek - e_prev, s.feedrate, index, s.active_tool, arc=True))
            prev, e_prev = p, ek
        s.position, s.e_axis = target, e
        return moves


def arc_center(start: Vec3, end: Vec3, line: GCodeLine, clockwise: bool) -> tuple[float, float] | None:
    if line.has("I") or line.has("J"):
        return start[0] + line.value("I", 0.0), start[1] + line.value("J", 0.0)
    r = line.value("R")
    if r is None or r == 0:
        return None
    dx, dy = end[0] - start[0], end[1] - start[1]
    chord = math.hypot(dx, dy)
    if chord == 0:
        return None
    # like Marlin, a radius too small for the chord degrades to a half circle
    h = math.sqrt(max(r * r - chord * chord / 4, 0.0))
    mx, my = start[0] + dx / 2, start[1] + dy / 2
    # unit normal pointing left of the chord direction
    nx, ny = -dy / chord, dx / chord
    # minor arc: center lies right of the chord for CW, left for CCW
    sign = -1.0 if clockwise else 1.0
    if r < 0:
        sign = -sign
    return mx + sign * h * nx, my + sign * h * ny


def arc_sweep(start: Vec3, end: Vec3, center: tuple[float, float], clockwise: bool) -> float:
    a0 = math.atan2(start[1] - center[1], start[0] - center[0])
    a1 = math.atan2(end[1] - center[1], end[0] - center[0])
    sweep = (a0 - a1) if clockwise else (a1 - a0)
    sweep %= 2 * math.pi
    if sweep < 1e-12:
        sweep = 2 * math.pi  # coincident endpoints mean a full circle
    return sweep


def linearize_arc(start: Vec3, end: Vec3, center: tuple[float, float], clockwise: bool,
                  tolerance: float = DEFAULT_ARC_TOLERANCE) -> list[Vec3]:
    """Segment end points (the last one is exactly ``end``) approximating the arc."""
    r = math.hypot(start[0] - center[0], start[1] - center[1])
    sweep = arc_sweep(start, end, center, clockwise)
    if r == 0:
        return [end]
    half = math.acos(1 - tolerance / r) if tolerance < r else math.pi / 2
    n = max(1, math.ceil(sweep / (2 * half)))
    a0 = math.atan2(start[1] - center[1], start[0] - center[0])
    step = (-sweep if clockwise else sweep) / n
    pts = []
    for k in range(1, n):
        a = a0 + step * k
        z = start[2] + (end[2] - start[2]) * k / n
        pts.append((center[0] + r * math.cos(a), center[1] + r * math.sin(a), z))
    pts.append(end)
    return pts


def replay(doc: GCodeDocument, initial: MachineState | None = None,
           arc_tolerance: float = DEFAULT_ARC_TOLERANCE) -> tuple[list[PrintMove], MachineState]:
    """Interpret ``doc`` and return the linear moves it produces and the final state."""
    interp = Interpreter(initial.copy() if initial is not None else MachineState(), arc_tolerance)
    moves: list[PrintMove] = []
    for i, line in enumerate(doc.lines):
        moves.extend(interp.step(i, line))
    return moves, interp.state


@dataclass(frozen=True)
class ToolSelect:
    line_index: int
    tool: int
    previous: int | None


def tool_selections(doc: GCodeDocument) -> list[ToolSelect]:
    """Every ``T<n>`` in order, including ones that re-select the active tool."""
    out = []
    prev = None
    for i, line in enumerate(doc.lines):
        if line.kind is LineKind.TOOL_CHANGE:
            tool = int(line.command[1:].split(".")[0])
            out.append(ToolSelect(i, tool, prev))
            prev = tool
    return out
