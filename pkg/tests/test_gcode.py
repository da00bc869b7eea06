import math

import pytest
from hypothesis import given, strategies as st

from porogen.errors import GCodeParseError, ReplayError
from porogen.gcode import (
    GCodeDocument,
    LineKind,
    MachineState,
    Mode,
    format_number,
    linearize_arc,
    parse_document,
    parse_line,
    replay,
    tool_selections,
)


def moves_of(text, **kw):
    return replay(parse_document(text), **kw)


class TestParse:
    def test_motion_line(self):
        line = parse_line(b"G1 X10 Y0 E0.5 ; perimeter")
        assert [(w.letter, w.value) for w in line.words] == [("G", 1), ("X", 10), ("Y", 0), ("E", 0.5)]
        assert line.comment == " perimeter"
        assert line.kind is LineKind.MOTION
        assert line.get("E").text == "0.5"

    def test_comment_only(self):
        doc = parse_document(";\n")
        assert len(doc) == 1
        assert doc[0].kind is LineKind.COMMENT_ONLY
        assert doc[0].words == ()

    def test_malformed_number(self):
        with pytest.raises(GCodeParseError) as exc:
            parse_document("G1 X1e\n")
        assert exc.value.line == 1
        assert exc.value.column == 4

    def test_error_reports_later_line(self):
        with pytest.raises(GCodeParseError) as exc:
            parse_document("G1 X1\nG1 Y2\nG1 Z#\n")
        assert exc.value.line == 3

    @pytest.mark.parametrize("raw,kind", [
        ("G90", LineKind.MODE), ("M83", LineKind.MODE), ("T1", LineKind.TOOL_CHANGE),
        ("G92 E0", LineKind.SET_POSITION), ("M104 S200", LineKind.OTHER), ("", LineKind.BLANK),
        ("G0 X1", LineKind.MOTION), ("G3 X1 I1", LineKind.MOTION),
    ])
    def test_kinds(self, raw, kind):
        assert parse_line(raw.encode()).kind is kind

    def test_line_number_and_checksum_ignored(self):
        line = parse_line(b"N12 G1 X5 E0.1*57")
        assert line.command == "G1"
        assert line.value("X") == 5
        assert line.serialize() == b"N12 G1 X5 E0.1*57\n"

    def test_string_argument_mcode(self):
        line = parse_line(b"M117 Layer 3 of X9e")
        assert line.command == "M117"
        assert line.serialize() == b"M117 Layer 3 of X9e\n"

    def test_bare_axis_letters(self):
        line = parse_line(b"G28 X Y")
        assert line.has("X") and line.has("Y") and not line.has("Z")

    def test_lowercase_and_packed(self):
        line = parse_line(b"g1x1.5y-.5E.25")
        assert (line.command, line.value("X"), line.value("Y"), line.value("E")) == ("G1", 1.5, -0.5, 0.25)


class TestRoundTrip:
    def test_corpus_identity(self, corpus_files):
        for f in corpus_files:
            data = f.read_bytes()
            assert parse_document(data).serialize() == data, f.name

    def test_empty(self):
        assert parse_document(b"").serialize() == b""

    def test_crlf_and_missing_final_newline(self):
        data = b"G1 X1 F100\r\nG1 X2\r\nG1 X3"
        doc = parse_document(data)
        assert len(doc) == 3
        assert doc.serialize() == data

    def test_single_rewrite_touches_one_line(self):
        data = b"M83\nG1 X1 E0.5 F600 ; a\nG1 X2 E0.5\n"
        doc = parse_document(data)
        new = doc.splice({1: [doc[1].with_values({"E": 0.123456})]})
        out = new.serialize().split(b"\n")
        assert out[0] == b"M83" and out[2] == b"G1 X2 E0.5"
        assert out[1] == b"G1 X1 E0.12346 F600 ; a"

    def test_rewrite_refreshes_checksum(self):
        doc = parse_document(b"N3 G1 X1 E0.5*0\n")
        line = doc[0].with_values({"E": 0.25})
        raw = line.raw.decode()
        body, cs = raw.rsplit("*", 1)
        expect = 0
        for ch in body.encode():
            expect ^= ch
        assert int(cs) == expect
        assert "E0.25" in body

    @given(st.lists(st.sampled_from([
        "G1 X1.5 Y2 E0.1", "G0 F9000", "; note", "", "  G1  X3\t; tab", "M104 S200", "T1", "G92 E0",
        "N5 G1 X1*9", "M117 hi; there", "G2 X1 Y1 I0.5 J0",
    ]), max_size=30), st.sampled_from(["\n", "\r\n"]), st.booleans())
    def test_round_trip_property(self, lines, eol, final):
        text = eol.join(lines) + (eol if final and lines else "")
        data = text.encode()
        assert parse_document(data).serialize() == data


class TestFormatting:
    @pytest.mark.parametrize("value,decimals,text", [
        (0.5, 5, "0.5"), (1.0, 3, "1"), (-0.00000001, 5, "0"), (0.123456, 5, "0.12346"), (-2.5, 3, "-2.5"),
    ])
    def test_canonical(self, value, decimals, text):
        assert format_number(value, decimals) == text


class TestReplay:
    def test_relative_mode(self):
        moves, state = moves_of("G91\nG1 X10 E1 F600\nG1 X10 E1\n")
        assert [m.delta_e for m in moves] == [1, 1]
        assert state.position[0] == 20

    def test_e_reset(self):
        moves, _ = moves_of("M83\nG1 X5 E0.2 F600\nG92 E0\nG1 X5 E0.2\n")
        assert [m.delta_e for m in moves] == pytest.approx([0.2, 0.2])

    def test_absolute_e_with_g92(self):
        moves, _ = moves_of("M82\nG1 X5 E2 F600\nG92 E0\nG1 X10 E0.5\n")
        assert [m.delta_e for m in moves] == [2, 0.5]

    def test_same_tool_twice(self):
        doc = parse_document("T0\nG1 X1 F100\nT0\n")
        _, state = replay(doc)
        assert state.active_tool == 0
        assert [t.tool for t in tool_selections(doc)] == [0, 0]

    def test_tool_recorded_on_moves(self):
        moves, _ = moves_of("T2\nG1 X1 F100\n")
        assert moves[0].tool == 2

    def test_feedrate_required(self):
        with pytest.raises(ReplayError) as exc:
            moves_of("G1 X1\n")
        assert exc.value.line_index == 0

    def test_nonpositive_feedrate(self):
        with pytest.raises(ReplayError):
            moves_of("G1 X1 F0\n")

    def test_arc_without_center(self):
        with pytest.raises(ReplayError) as exc:
            moves_of("G1 F100\nG2 X1 Y1\n")
        assert exc.value.line_index == 1

    def test_g28_and_g92(self):
        _, state = moves_of("G1 X5 Y6 Z7 F100\nG28 X\n")
        assert state.position == (0, 6, 7)
        _, state = moves_of("G1 X5 Y6 Z7 E1 F100\nG92\n")
        assert state.position == (0, 0, 0) and state.e_axis == 0

    def test_g91_makes_e_relative(self):
        s = MachineState(xyz_mode=Mode.RELATIVE, e_mode=Mode.ABSOLUTE)
        assert s.e_relative

    def test_unknown_mcode_has_no_effect(self):
        moves, state = moves_of("M999 S1\nM104 S200\n")
        assert moves == [] and state == MachineState()

    def test_deterministic(self, corpus_files):
        for f in corpus_files:
            doc = parse_document(f.read_bytes())
            assert replay(doc) == replay(doc)

    def test_mode_toggle_symmetry(self):
        prog = "G90\nG1 X5 Y5 F100\nG91\nG1 X3 Y-2\nG1 X-3 Y2\nG90\nG91\nG1 X1\nG1 X-1\nG90\n"
        _, state = moves_of(prog)
        assert state.position == (5, 5, 0)


class TestArcs:
    def test_quarter_circle(self):
        moves, state = moves_of("G1 X10 Y0 F100\nG3 X0 Y10 I-10 J0 E1\n")
        arc = [m for m in moves if m.arc]
        assert state.position == (0, 10, 0)
        assert sum(m.delta_e for m in arc) == pytest.approx(1)
        assert all(math.hypot(*m.end[:2]) == pytest.approx(10) for m in arc)

    def test_radius_form(self):
        _, state = moves_of("G1 X0 Y0 F100\nG2 X10 Y0 R5\n")
        assert state.position == (10, 0, 0)

    @given(st.floats(0.5, 50), st.floats(0.1, 2 * math.pi - 0.1), st.sampled_from([0.01, 0.001, 0.05]),
           st.booleans())
    def test_chord_bound(self, r, sweep, tol, cw):
        a0 = 0.3
        start = (r * math.cos(a0), r * math.sin(a0), 0.0)
        a1 = a0 - sweep if cw else a0 + sweep
        end = (r * math.cos(a1), r * math.sin(a1), 0.0)
        pts = [start] + linearize_arc(start, end, (0.0, 0.0), cw, tol)
        chords = sum(math.dist(p, q) for p, q in zip(pts, pts[1:]))
        arc = r * sweep
        assert chords <= arc + 1e-9
        # sagitta <= tol per chord bounds the length deficit by arc * tol / r
        assert arc - chords <= arc * tol / r + 1e-9
        for p, q in zip(pts, pts[1:]):
            mid = ((p[0] + q[0]) / 2, (p[1] + q[1]) / 2)
            assert r - math.hypot(*mid) <= tol + 1e-9


def test_document_is_immutable():
    doc = parse_document("G1 X1\n")
    assert isinstance(doc, GCodeDocument)
    with pytest.raises(AttributeError):
        doc.lines = ()
