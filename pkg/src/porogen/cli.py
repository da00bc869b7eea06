"""``porogen`` command line.

Exit codes: 0 success (warnings included), 2 usage or config, 3 unreadable
or unparseable input, 4 transform failure, 5 simulation failure, 6
analysis failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from porogen import REPORT_SCHEMA, __version__
from porogen.bench import analyze, load_traces, onset_estimate, failure_point, reference_csv
from porogen.config import ConfigError, RunConfig, load_config, parse_tool_alias
from porogen.errors import (
    AnalysisError,
    FlowModelError,
    GCodeParseError,
    PorogenError,
    RegionError,
    ReplayError,
    SimulationError,
)
from porogen.flow import FlowParams, deposit_area, line_width, parse_gamma, table1_csv, table1_report
from porogen.gcode import MachineState, parse_document, replay
from porogen.regions import apply_regions, load_regions, remove_redundant_toolchanges
from porogen.sample import SampleSpec, plan_porous_sample
from porogen.sim import Rect, export_raster, porosity_report, simulate

log = logging.getLogger("porogen")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_TRANSFORM, EXIT_SIMULATE, EXIT_ANALYZE = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# argument types

def _gamma_arg(text: str) -> float:
    try:
        return parse_gamma(text)
    except FlowModelError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0 or value != value or value == float("inf"):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _rect_arg(text: str) -> Rect:
    try:
        x0, y0, x1, y1 = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x0,y0,x1,y1, got {text!r}") from None
    if not (x1 > x0 and y1 > y0):
        raise argparse.ArgumentTypeError(f"empty rectangle {text!r}")
    return Rect(x0, y0, x1, y1)


def _tool_alias_arg(text: str) -> dict[int, int]:
    try:
        return parse_tool_alias(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --------------------------------------------------------------------------
# io helpers

def write_atomic(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_PARSE) from None


def _digest(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _timestamp(args: argparse.Namespace) -> str:
    if args.fixed_timestamp is not None:
        return args.fixed_timestamp
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def _report(args: argparse.Namespace, command: str, cfg: RunConfig, inputs: dict[str, bytes],
            **sections: Any) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "tool": "porogen",
        "version": __version__,
        "command": command,
        "timestamp": _timestamp(args),
        "inputs": {name: _digest(data) for name, data in inputs.items()},
        "printer": {
            "filament_diameter_mm": cfg.filament_diameter,
            "nominal_width_mm": cfg.nominal_width,
            "layer_height_mm": cfg.layer_height,
            "dialect": cfg.dialect,
        },
        **sections,
    }


def _dump(report: dict) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=False, ensure_ascii=False) + "\n").encode("utf-8")


def _config(args: argparse.Namespace, **overrides: Any) -> RunConfig:
    cfg = load_config(args.config)
    cfg.update(
        filament_diameter=args.filament_diameter,
        nominal_width=args.nominal_width,
        layer_height=args.layer_height,
        report=getattr(args, "report", None),
        **overrides,
    )
    return cfg


def _flow_prediction(params: FlowParams) -> dict:
    width, regime = line_width(params)
    return {
        "gamma": params.gamma,
        "width_um": round(width * 1000, 6),
        "regime": regime.value,
        "area_mm2": round(deposit_area(width, params.layer_height), 9),
    }


# --------------------------------------------------------------------------
# commands

def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.gamma is None and not args.table1:
        raise CliError("predict needs --gamma and/or --table1", EXIT_USAGE)
    out = []
    if args.gamma is not None:
        try:
            params = cfg.flow_params(args.gamma)
        except FlowModelError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
        width, regime = line_width(params)
        out.append(f"{width * 1000:.1f} µm, {regime.value} regime")
        out.append(f"cross-section {deposit_area(width, params.layer_height):.6f} mm² "
                   f"({'circular fibre' if regime.value == 'fiber' else 'stadium'})")
    if args.table1:
        try:
            rep = table1_report(cfg.flow_params())
        except FlowModelError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
        out.append(f"{'flow':>5} {'model µm':>9} {'table µm':>9} {'measured':>9} {'|err|':>6}  regime")
        for r in rep.rows:
            out.append(f"{r.flow_percent:>4}% {r.model_um:>9.1f} {r.table_predicted_um:>9} "
                       f"{r.measured_um:>9} {r.table_abs_error_um:>6}  {r.regime.value}")
        out.append(f"mean |error|: {rep.table_mean_abs_error_um:.2f} µm (table column), "
                   f"{rep.model_mean_abs_error_um:.2f} µm (model vs measured)")
    print("\n".join(out))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _config(args)
    try:
        spec = SampleSpec(width=args.width, depth=args.depth, solid_height=args.solid_height,
                          porous_height=args.porous_height, params=cfg.flow_params(args.gamma),
                          absolute_e=args.absolute_e)
        doc = plan_porous_sample(spec)
    except (FlowModelError, RegionError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    write_atomic(args.output, doc.serialize())
    return EXIT_OK


def cmd_transform(args: argparse.Namespace) -> int:
    cfg = _config(args, regions=args.regions, source_gamma=args.source_gamma,
                  remove_toolchanges=args.remove_toolchanges or None, tool_alias=args.tool_alias)
    data = _read_bytes(args.input)
    inputs = {str(args.input): data}
    doc = parse_document(data)
    regions = []
    if cfg.regions is not None:
        inputs[str(cfg.regions)] = _read_bytes(cfg.regions)
        regions = load_regions(cfg.regions)
    initial = MachineState()
    replay(doc, initial, cfg.arc_tolerance)  # surface parse/replay errors before transforming
    removed = 0
    if cfg.remove_toolchanges:
        doc, removed = remove_redundant_toolchanges(doc, cfg.tool_alias, cfg.toolchange_block_start,
                                                    cfg.toolchange_block_end)
    params = cfg.flow_params(cfg.source_gamma)
    out, treport = apply_regions(doc, regions, cfg.source_gamma, params, arc_tolerance=cfg.arc_tolerance)
    treport.toolchanges_removed = removed
    for w in treport.warnings:
        log.warning(w)
    report = _report(args, "transform", cfg, inputs,
                     output=str(args.output),
                     source_gamma=cfg.source_gamma,
                     flow_predictions=[_flow_prediction(params)]
                     + [_flow_prediction(params.with_gamma(r.target_gamma)) for r in regions],
                     transform=treport.to_dict(),
                     porosity=None,
                     warnings=list(treport.warnings))
    write_atomic(args.output, out.serialize())
    if cfg.report is not None:
        write_atomic(cfg.report, _dump(report))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args, resolution=args.resolution, workers=args.workers)
    data = _read_bytes(args.input)
    doc = parse_document(data)
    moves, _ = replay(doc, arc_tolerance=cfg.arc_tolerance)
    z_range = None
    if args.z_min is not None or args.z_max is not None:
        z_range = (args.z_min if args.z_min is not None else float("-inf"),
                   args.z_max if args.z_max is not None else float("inf"))
    params = cfg.flow_params()
    rasters = simulate(moves, params, cfg.resolution, z_range, cfg.workers)
    preport = porosity_report(rasters, params, args.region)
    warnings = []
    if not rasters:
        warnings.append("no layers in the selected z range")
    if args.export_dir is not None:
        export_dir = Path(args.export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
        for k, r in enumerate(rasters):
            write_atomic(export_dir / f"layer_{k:04d}_z{r.z:.3f}.{args.format}", export_raster(r, args.format))
    print(f"{'layer':>5} {'z mm':>7} {'porosity':>9} {'width µm':>9} {'gamma':>6}")
    for layer in preport.layers:
        width = "-" if layer.mean_width is None else f"{layer.mean_width * 1000:.1f}"
        gamma = "-" if layer.mean_gamma is None else f"{layer.mean_gamma:.3f}"
        print(f"{layer.index:>5} {layer.z:>7.3f} {layer.porosity:>9.4f} {width:>9} {gamma:>6}")
    for g, p in preport.by_gamma().items():
        print(f"gamma {g:g}: mean porosity {p:.4f}")
    for w in warnings:
        log.warning(w)
    if cfg.report is not None:
        report = _report(args, "simulate", cfg, {str(args.input): data},
                         flow_predictions=[_flow_prediction(params.with_gamma(g)) for g in preport.by_gamma()],
                         transform=None,
                         porosity=preport.to_dict(),
                         warnings=warnings)
        write_atomic(cfg.report, _dump(report))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _config(args, tolerance=args.tolerance)
    traces, errors = load_traces(args.paths)
    for msg in errors.values():
        log.error("%s", msg)
    if not traces:
        raise CliError("no usable trace files" + (f" ({len(errors)} failed)" if errors else ""), EXIT_ANALYZE)
    breport = analyze(traces, cfg.tolerance, errors)
    for s in breport.summaries:
        print(f"{s.material:<16} {s.test:<22} {s.method:<10} {s}")
    for imp in breport.improvements:
        line = (f"{imp['material']} {imp['test']} {imp['method']} vs silpoxy: "
                f"{imp['improvement_percent']:+.1f}% (ratio {imp['ratio_percent']:.1f}%)")
        if "published_improvement_percent" in imp:
            line += f", published {imp['published_improvement_percent']}%"
        print(line)
    for c in breport.comparisons:
        material, test, method = c.key
        verdict = "ok" if c.passed else "DEVIATES"
        print(f"reference {material}/{test}/{method}: {c.computed_mean:.2f} vs {c.reference_mean:g} "
              f"({c.rel_deviation * 100:.1f}%) {verdict}")
    for note in breport.notes:
        print(f"note: {note}")
    if cfg.report is not None:
        per_trace = []
        for t in sorted(traces, key=lambda t: (t.key, t.label)):
            x, peak = failure_point(t)
            onset = onset_estimate(t, args.onset_drop)
            per_trace.append({"label": t.label, "material": t.material, "test": t.test, "method": t.method,
                              "failure_abscissa": x, "failure_value": peak,
                              "onset_estimate": None if onset is None else list(onset)})
        inputs = {}
        for p in args.paths:
            p = Path(p)
            for f in (sorted(p.glob("*.csv")) if p.is_dir() else [p]):
                if f.is_file():
                    inputs[str(f)] = f.read_bytes()
        report = _report(args, "analyze", cfg, inputs, traces=per_trace, bench=breport.to_dict(),
                         warnings=[f"{k}: {v}" for k, v in sorted(errors.items())])
        write_atomic(cfg.report, _dump(report))
    return EXIT_OK


def cmd_reference_export(args: argparse.Namespace) -> int:
    text = table1_csv() if args.table == "table1" else reference_csv()
    if args.output:
        write_atomic(args.output, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="porogen", description="Region-selective underextrusion for porous FDM prints.")
    parser.add_argument("--version", action="version",
                        version=f"porogen {__version__} (report schema {REPORT_SCHEMA})")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--filament-diameter", type=_positive, metavar="MM")
    common.add_argument("--nominal-width", type=_positive, metavar="MM")
    common.add_argument("--layer-height", type=_positive, metavar="MM")
    common.add_argument("--fixed-timestamp", metavar="TEXT",
                        help="timestamp written to reports (for reproducible output)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", parents=[common], help="line width from flow")
    p.add_argument("--gamma", type=_gamma_arg, help="flow: fraction (0.3) or percent (30%%)")
    p.add_argument("--table1", action="store_true", help="print the microscopy comparison")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample", parents=[common], help="write the porous test-coupon toolpath")
    p.add_argument("-o", "--output", required=True, type=Path)
    p.add_argument("--gamma", type=_gamma_arg, default=1.0, help="flow of the porous layers")
    p.add_argument("--width", type=_positive, default=20.0)
    p.add_argument("--depth", type=_positive, default=20.0)
    p.add_argument("--solid-height", type=_positive, default=1.0)
    p.add_argument("--porous-height", type=_positive, default=2.0)
    p.add_argument("--absolute-e", action="store_true", help="emit M82 absolute extrusion")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("transform", parents=[common], help="rescale extrusion inside regions")
    p.add_argument("input", type=Path)
    p.add_argument("-r", "--regions", type=Path, help="regions TOML")
    p.add_argument("-o", "--output", required=True, type=Path)
    p.add_argument("--report", type=Path)
    p.add_argument("--source-gamma", type=_gamma_arg, help="flow already present in the input")
    p.add_argument("--remove-toolchanges", action="store_true")
    p.add_argument("--tool-alias", type=_tool_alias_arg, help="virtual=physical pairs, e.g. 0=0,1=0")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("simulate", parents=[common], help="per-layer deposition raster and porosity")
    p.add_argument("input", type=Path)
    p.add_argument("--resolution", type=_positive, metavar="MM")
    p.add_argument("--z-min", type=float)
    p.add_argument("--z-max", type=float)
    p.add_argument("--region", type=_rect_arg, metavar="X0,Y0,X1,Y1")
    p.add_argument("--export-dir", type=Path)
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="summarise bench-test traces")
    p.add_argument("paths", nargs="+", type=Path, help="trace CSV files or directories")
    p.add_argument("--tolerance", type=_positive, help="relative deviation allowed vs reference")
    p.add_argument("--onset-drop", type=_positive, default=0.2, help="load drop fraction for onset")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("reference", help="embedded reference data")
    rsub = p.add_subparsers(dest="action", required=True)
    e = rsub.add_parser("export", help="write reference data as CSV")
    e.add_argument("table", choices=("table1", "bond"))
    e.add_argument("-o", "--output", type=Path)
    e.set_defaults(func=cmd_reference_export)
    return parser


_EXIT_FOR = (
    (ConfigError, EXIT_USAGE),
    (GCodeParseError, EXIT_PARSE),
    (ReplayError, EXIT_PARSE),
    (RegionError, EXIT_TRANSFORM),
    (SimulationError, EXIT_SIMULATE),
    (AnalysisError, EXIT_ANALYZE),
    (FlowModelError, EXIT_USAGE),
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="porogen: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"porogen: error: {exc}", file=sys.stderr)
        return exc.code
    except PorogenError as exc:
        code = next((c for cls, c in _EXIT_FOR if isinstance(exc, cls)), 1)
        print(f"porogen: error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"porogen: error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
