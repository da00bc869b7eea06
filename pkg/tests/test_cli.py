import json
import subprocess
import sys

import pytest

from oracles import e_by_membership
from porogen import REPORT_SCHEMA, __version__
from porogen.cli import main, write_atomic
from porogen.gcode import parse_document
from porogen.regions import ZSlab
from synth import write_group

REGIONS = '[[region]]\nlabel = "porous"\nshape = "zslab"\nz_min = 1.0\ngamma = "{g}"\n'


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def make_sample(work, name="s.gcode", *extra):
    assert run("sample", "-o", name, *extra) == 0
    return work / name


class TestPredict:
    def test_thirty_percent(self, capsys):
        assert run("predict", "--gamma", "30%") == 0
        assert capsys.readouterr().out.splitlines()[0] == "162.9 µm, fiber regime"

    def test_full_flow(self, capsys):
        assert run("predict", "--gamma", "100%") == 0
        out = capsys.readouterr().out
        assert out.startswith("442.9 µm, trace regime")
        assert "0.080000 mm²" in out

    @pytest.mark.parametrize("value", ["0", "abc", "30", "300%"])
    def test_usage_errors(self, value, capsys):
        assert run("predict", "--gamma", value) == 2
        assert "error" in capsys.readouterr().err

    def test_table1(self, capsys):
        assert run("predict", "--table1") == 0
        out = capsys.readouterr().out
        assert "6.50 µm (table column)" in out
        assert len([l for l in out.splitlines() if "%" in l]) == 8

    def test_printer_flags(self, capsys):
        assert run("predict", "--gamma", "50%", "--nominal-width", "0.6", "--layer-height", "0.3") == 0
        assert capsys.readouterr().out.startswith("364.4 µm, trace regime")

    def test_bad_length_flag(self):
        assert run("predict", "--gamma", "0.5", "--layer-height", "-1") == 2


def test_version(capsys):
    assert run("--version") == 0
    assert capsys.readouterr().out.strip() == f"porogen {__version__} (report schema {REPORT_SCHEMA})"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "porogen", "--version"], capture_output=True, text=True, check=True)
    assert REPORT_SCHEMA in out.stdout


def test_no_command():
    assert run() == 2


class TestTransform:
    def test_slab_scaling(self, work):
        src = make_sample(work)
        (work / "r.toml").write_text(REGIONS.format(g="30%"))
        assert run("transform", src, "-r", "r.toml", "-o", "out.gcode", "--report", "rep.json",
                   "--fixed-timestamp", "T0") == 0
        before = e_by_membership(parse_document(src.read_bytes()), ZSlab(1.0))
        after = e_by_membership(parse_document((work / "out.gcode").read_bytes()), ZSlab(1.0))
        assert after[0] == pytest.approx(0.3 * before[0], rel=1e-6)
        assert after[1] == pytest.approx(before[1], rel=1e-12)
        rep = json.loads((work / "rep.json").read_text())
        assert rep["schema"] == REPORT_SCHEMA and rep["timestamp"] == "T0"
        assert rep["inputs"][str(src)].startswith("sha256:")
        assert rep["transform"]["regions"][0]["regime"] == "fiber"
        assert rep["warnings"] == []

    def test_no_regions_copies(self, work):
        src = make_sample(work)
        assert run("transform", src, "-o", "copy.gcode", "--report", "rep.json") == 0
        assert (work / "copy.gcode").read_bytes() == src.read_bytes()
        assert json.loads((work / "rep.json").read_text())["transform"]["moves_modified"] == 0

    def test_overlap(self, work, capsys):
        src = make_sample(work)
        (work / "r.toml").write_text(REGIONS.format(g="30%") + '[[region]]\nlabel = "post"\nshape = "box"\n'
                                     'min = [0, 0, 0]\nmax = [5, 5, 2]\ngamma = 0.5\n')
        assert run("transform", src, "-r", "r.toml", "-o", "out.gcode") == 4
        assert "'porous' and 'post' overlap" in capsys.readouterr().err
        assert not (work / "out.gcode").exists()

    def test_error_leaves_existing_output_intact(self, work):
        (work / "bad.gcode").write_text("G1 X1 F100\nG1 Y1e\n")
        (work / "out.gcode").write_text("previous")
        assert run("transform", "bad.gcode", "-o", "out.gcode") == 3
        assert (work / "out.gcode").read_text() == "previous"
        assert sorted(p.name for p in work.iterdir()) == ["bad.gcode", "out.gcode"]

    def test_replay_error(self, work):
        (work / "arc.gcode").write_text("G1 F100\nG2 X1 Y1\n")
        assert run("transform", "arc.gcode", "-o", "out.gcode") == 3

    def test_missing_input(self, work):
        assert run("transform", "nope.gcode", "-o", "out.gcode") == 3

    def test_empty_region_warns(self, work, caplog):
        src = make_sample(work)
        (work / "r.toml").write_text('[[region]]\nlabel="sky"\nshape="zslab"\nz_min=50\ngamma=0.3\n')
        assert run("transform", src, "-r", "r.toml", "-o", "out.gcode", "--report", "rep.json") == 0
        assert json.loads((work / "rep.json").read_text())["warnings"] == [
            "region 'sky' does not intersect any extrusion"]
        assert (work / "out.gcode").read_bytes() == src.read_bytes()

    def test_toolchanges_and_config(self, work):
        (work / "tc.gcode").write_text("T0\nM83\nG1 X1 F100\nT1\nG1 X2 E1\n")
        (work / "run.toml").write_text('[transform]\nremove_toolchanges = true\ntool_alias = { "0" = 0, "1" = 0 }\n'
                                       '[report]\npath = "cfg.json"\n')
        assert run("transform", "tc.gcode", "-o", "out.gcode", "--config", "run.toml") == 0
        assert (work / "out.gcode").read_text() == "T0\nM83\nG1 X1 F100\nG1 X2 E1\n"
        assert json.loads((work / "cfg.json").read_text())["transform"]["toolchanges_removed"] == 1

    def test_unmapped_tool(self, work):
        (work / "tc.gcode").write_text("T0\nG1 X1 F100\nT3\n")
        assert run("transform", "tc.gcode", "-o", "o.gcode", "--remove-toolchanges", "--tool-alias", "0=0") == 4

    def test_bad_config(self, work):
        (work / "s.gcode").write_text("")
        (work / "run.toml").write_text("[printer]\nnozzle = 0.4\n")
        assert run("transform", "s.gcode", "-o", "o.gcode", "--config", "run.toml") == 2


class TestSimulate:
    def _porosity(self, work, gamma, capsys):
        make_sample(work, f"s{gamma}.gcode", "--gamma", gamma)
        assert run("simulate", f"s{gamma}.gcode", "--z-min", "1.1", "--region", "2,2,18,18") == 0
        line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("gamma")][0]
        return float(line.split()[-1])

    def test_trend(self, work, capsys):
        assert self._porosity(work, "30%", capsys) > self._porosity(work, "100%", capsys)

    def test_travel_only(self, work, capsys):
        (work / "t.gcode").write_text("G0 X0 Y0 Z0.2 F9000\nG0 X10 Y10\nG0 Z0.4\nG0 X0 Y0\n")
        assert run("simulate", "t.gcode", "--region", "0,0,10,10", "--report", "r.json") == 0
        rep = json.loads((work / "r.json").read_text())
        assert [l["porosity"] for l in rep["porosity"]["layers"]] == [1.0, 1.0]

    def test_too_coarse(self, work, capsys):
        make_sample(work, "s.gcode", "--gamma", "10%")
        assert run("simulate", "s.gcode", "--resolution", "0.5") == 5
        assert "resolution too coarse" in capsys.readouterr().err

    def test_exports(self, work):
        make_sample(work, "s.gcode", "--width", "4", "--depth", "4", "--solid-height", "0.2",
                    "--porous-height", "0.2", "--gamma", "30%")
        assert run("simulate", "s.gcode", "--export-dir", "img", "--format", "csv") == 0
        names = sorted(p.name for p in (work / "img").iterdir())
        assert names == ["layer_0000_z0.200.csv", "layer_0001_z0.400.csv"]

    @pytest.mark.parametrize("flag", [["--resolution", "0"], ["--workers", "0"], ["--region", "1,1,0,0"]])
    def test_usage(self, work, flag):
        (work / "s.gcode").write_text("")
        assert run("simulate", "s.gcode", *flag) == 2


class TestAnalyze:
    def test_reference_groups(self, work, capsys):
        write_group(work, [11.23, 12.45, 13.67], "Ecoflex 00-10", "lap_shear", "underextrusion", "30%", "ls_g")
        write_group(work, [4.95, 6.03, 7.11], "Ecoflex 00-10", "lap_shear", "silpoxy", prefix="ls_s")
        assert run("analyze", work, "--report", "bench.json", "--fixed-timestamp", "T") == 0
        out = capsys.readouterr().out
        assert "+106.5%" in out and "published 106.2%" in out
        rep = json.loads((work / "bench.json").read_text())
        assert len(rep["traces"]) == 6
        assert all(c["passed"] for c in rep["bench"]["comparisons"])

    def test_corrupt_file(self, work, caplog):
        write_group(work, [3, 4], "Ecoflex 00-10", "peel", "silpoxy")
        (work / "zz.csv").write_text("#kind=force_displacement\nabscissa,value\n1,0\n0,1\n")
        assert run("analyze", work, "--report", "b.json") == 0
        rep = json.loads((work / "b.json").read_text())
        assert list(rep["bench"]["errors"]) == [str(work / "zz.csv")]
        assert "zz.csv: row 2" in caplog.text

    def test_empty_directory(self, work):
        (work / "empty").mkdir()
        assert run("analyze", "empty") == 6

    def test_all_fail(self, work):
        (work / "a.csv").write_text("nonsense")
        assert run("analyze", "a.csv") == 6


class TestReference:
    def test_table1(self, capsys):
        assert run("reference", "export", "table1") == 0
        assert capsys.readouterr().out.splitlines()[1] == "10,82,73,9"

    def test_bond_to_file(self, work):
        assert run("reference", "export", "bond", "-o", "bond.csv") == 0
        assert "ecoflex_00_10,lap_shear,gamma=0.3,12.45,1.22,0" in (work / "bond.csv").read_text()


def test_write_atomic_replaces(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("old")
    write_atomic(p, b"new")
    assert p.read_bytes() == b"new"
    assert [x.name for x in tmp_path.iterdir()] == ["f.txt"]
