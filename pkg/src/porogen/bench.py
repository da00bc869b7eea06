"""Bench-test traces (lap shear, peel, ballooning) and their reference values.

Trace files are CSV with ``#key=value`` metadata lines before the
``abscissa,value`` header::

    #kind=force_displacement
    #material=Ecoflex 00-10
    #test=lap_shear
    #method=underextrusion
    #gamma=30%
    #label=specimen-1
    abscissa,value
    0.0,0.0
    0.5,3.1
"""

from __future__ import annotations

import bisect
import csv
import io
import math
import re
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from porogen.errors import AnalysisError, FlowModelError
from porogen.flow import parse_gamma


class TraceKind(Enum):
    FORCE_DISPLACEMENT = "force_displacement"  # mm, N
    PRESSURE_TIME = "pressure_time"  # s, kPa


def normalize_material(name: str) -> str:
    """``"Dragon-Skin 10"`` -> ``"dragonskin_10"``."""
    key = re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")
    key = key.replace("dragon_skin", "dragonskin")
    return key


def method_key(method: str, gamma: float | None = None) -> str:
    """Canonical bonding-method key: ``silpoxy`` or ``gamma=0.3``."""
    m = method.strip().lower().replace("-", "").replace(" ", "").replace("γ", "gamma")
    if m in ("silpoxy", "glue", "adhesive"):
        return "silpoxy"
    if m.startswith("gamma="):
        gamma = parse_gamma(m.split("=", 1)[1])
    elif m not in ("underextrusion", "porous"):
        raise AnalysisError(f"unknown bonding method {method!r}")
    if gamma is None:
        raise AnalysisError(f"method {method!r} needs a gamma value")
    return f"gamma={gamma:g}"


@dataclass(frozen=True)
class MechTrace:
    kind: TraceKind
    samples: tuple[tuple[float, float], ...]
    material: str = ""
    method: str = ""
    test: str = ""
    gamma: float | None = None
    label: str = ""

    def __post_init__(self) -> None:
        for n, (x, y) in enumerate(self.samples):
            if not (math.isfinite(x) and math.isfinite(y)):
                raise AnalysisError(f"sample {n}: non-finite value ({x}, {y})")
            if n and not x > self.samples[n - 1][0]:
                raise AnalysisError(f"sample {n}: abscissa {x} is not greater than the previous one")

    @property
    def key(self) -> tuple[str, str, str]:
        return self.material, self.test, self.method


def load_trace(source: str | Path | io.TextIOBase, name: str | None = None) -> MechTrace:
    if isinstance(source, (str, Path)):
        name = name or str(source)
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
        name = name or "<stream>"
    meta: dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].split("=", 1)
                meta[k.strip().lower()] = v.strip()
        elif line.strip():
            body.append(line)
    if "kind" not in meta:
        raise AnalysisError(f"{name}: missing '#kind=' metadata")
    try:
        kind = TraceKind(meta["kind"])
    except ValueError:
        raise AnalysisError(f"{name}: unknown kind {meta['kind']!r}") from None
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["abscissa", "value"]:
        raise AnalysisError(f"{name}: expected header 'abscissa,value'")
    samples = []
    prev = None
    for row_no, row in enumerate(reader, start=1):
        try:
            x, y = (float(v) for v in row)
        except ValueError:
            raise AnalysisError(f"{name}: row {row_no}: expected two numbers, got {row}") from None
        if math.isnan(x) or math.isnan(y):
            raise AnalysisError(f"{name}: row {row_no}: NaN value")
        if prev is not None and not x > prev:
            raise AnalysisError(f"{name}: row {row_no}: abscissa {x:g} does not increase (previous {prev:g})")
        prev = x
        samples.append((x, y))
    gamma = None
    if meta.get("gamma"):
        try:
            gamma = parse_gamma(meta["gamma"])
        except FlowModelError as exc:
            raise AnalysisError(f"{name}: {exc}") from None
    method = meta.get("method", "")
    if method:
        method = method_key(method, gamma)
    return MechTrace(kind, tuple(samples), normalize_material(meta.get("material", "")), method,
                     meta.get("test", "").strip().lower(), gamma, meta.get("label", Path(name).stem))


def failure_point(trace: MechTrace) -> tuple[float, float]:
    """Global maximum of the trace; the earliest sample wins ties."""
    if len(trace.samples) < 2:
        raise AnalysisError("need at least two samples to locate a failure point")
    best = trace.samples[0]
    for x, y in trace.samples[1:]:
        if y > best[1]:
            best = (x, y)
    if all(y == 0 for _, y in trace.samples):
        raise AnalysisError("no load detected (trace is identically zero)")
    return best


def onset_estimate(trace: MechTrace, drop: float = 0.2) -> tuple[float, float] | None:
    """First local peak that is followed by a fall of more than ``drop`` (fraction).

    A heuristic for where breakage starts, as opposed to final rupture.
    Returns None when the load never falls that far.
    """
    peak = None
    for x, y in trace.samples:
        if peak is None or y > peak[1]:
            peak = (x, y)
        elif peak[1] > 0 and y < (1 - drop) * peak[1]:
            return peak
    return None


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int
    material: str = ""
    test: str = ""
    method: str = ""

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f} (n={self.n})"


def summarize(traces: Sequence[MechTrace]) -> Summary:
    """Mean and sample standard deviation (n - 1) of the failure peaks."""
    if len(traces) < 2:
        raise AnalysisError("need at least two traces for a mean ± std summary")
    keys = {t.key for t in traces}
    if len(keys) > 1:
        raise AnalysisError(f"traces mix materials/tests/methods: {sorted(keys)}")
    peaks = sorted(failure_point(t)[1] for t in traces)  # sorted: order-independent rounding
    material, test, method = keys.pop()
    return Summary(statistics.fmean(peaks), statistics.stdev(peaks), len(peaks), material, test, method)


def improvement(mean_a: float | Summary, mean_b: float | Summary) -> float:
    """Percent by which ``a`` exceeds ``b``."""
    a = mean_a.mean if isinstance(mean_a, Summary) else mean_a
    b = mean_b.mean if isinstance(mean_b, Summary) else mean_b
    if not b > 0:
        raise AnalysisError(f"baseline mean must be positive, got {b}")
    return (a - b) / b * 100


def ratio_percent(mean_a: float, mean_b: float) -> float:
    """``a`` as a percentage of ``b`` (100 means equal)."""
    if not mean_b > 0:
        raise AnalysisError(f"baseline mean must be positive, got {mean_b}")
    return mean_a / mean_b * 100


@dataclass(frozen=True)
class CycleDrift:
    peaks: tuple[float, ...]
    first: float
    last: float

    @property
    def drift_percent(self) -> float:
        return (self.last - self.first) / self.first * 100


def cycle_drift(trace: MechTrace, boundaries: Sequence[float]) -> CycleDrift:
    """Peak of each cycle ``[b[k], b[k+1])`` (the last cycle includes its end)."""
    if trace.kind is not TraceKind.PRESSURE_TIME:
        raise AnalysisError("cycle drift needs a pressure_time trace")
    if len(boundaries) < 3:
        raise AnalysisError("need at least two cycles (three boundaries)")
    if any(b1 <= b0 for b0, b1 in zip(boundaries, boundaries[1:])):
        raise AnalysisError("cycle boundaries must be strictly increasing")
    xs = [x for x, _ in trace.samples]
    peaks = []
    n_cycles = len(boundaries) - 1
    for k in range(n_cycles):
        lo = bisect.bisect_left(xs, boundaries[k])
        hi = (bisect.bisect_right if k == n_cycles - 1 else bisect.bisect_left)(xs, boundaries[k + 1])
        if lo >= hi:
            raise AnalysisError(f"cycle {k} [{boundaries[k]:g}, {boundaries[k + 1]:g}) has no samples")
        peaks.append(max(y for _, y in trace.samples[lo:hi]))
    if not peaks[0] > 0:
        raise AnalysisError("first cycle peak must be positive")
    return CycleDrift(tuple(peaks), peaks[0], peaks[-1])


# --------------------------------------------------------------------------
# published values

class Test(str, Enum):
    LAP_SHEAR = "lap_shear"
    PEEL = "peel"
    BALLOON_PRESSURE = "balloon_pressure_kPa"
    BALLOON_DEFLECTION = "balloon_deflection_mm"


UNITS = {Test.LAP_SHEAR: "N", Test.PEEL: "N", Test.BALLOON_PRESSURE: "kPa", Test.BALLOON_DEFLECTION: "mm"}


@dataclass(frozen=True)
class BondReference:
    material: str
    test: str
    method: str
    mean_text: str
    std_text: str | None = None
    upper_bound: bool = False  # the value is only known to lie below mean

    @property
    def mean(self) -> float:
        return float(self.mean_text)

    @property
    def std(self) -> float | None:
        return None if self.std_text is None else float(self.std_text)

    @property
    def key(self) -> tuple[str, str, str]:
        return self.material, self.test, self.method

    def quoted(self) -> str:
        unit = UNITS[Test(self.test)]
        if self.upper_bound:
            return f"<{self.mean_text} {unit}"
        if self.std_text is None:
            return f"{self.mean_text} {unit}"
        return f"{self.mean_text} ± {self.std_text} {unit}"


def _rows(material: str, test: Test, values: dict[str, str]) -> list[BondReference]:
    out = []
    for method, text in values.items():
        upper = text.startswith("<")
        text = text.lstrip("<")
        mean, _, std = text.partition("±")
        out.append(BondReference(material, test.value, method, mean.strip(), std.strip() or None, upper))
    return out


ECOFLEX = "ecoflex_00_10"
DRAGONSKIN = "dragonskin_10"

BOND_REFERENCE: tuple[BondReference, ...] = tuple(
    _rows(ECOFLEX, Test.LAP_SHEAR, {"silpoxy": "6.03±1.08", "gamma=0.1": "10.46±2.87",
                                     "gamma=0.3": "12.45±1.22", "gamma=0.5": "9.57±0.38"})
    + _rows(ECOFLEX, Test.PEEL, {"silpoxy": "3.18±1.39", "gamma=0.1": "4.14±0.82",
                                 "gamma=0.3": "10.41±1.35", "gamma=0.5": "7.44±1.55"})
    + _rows(DRAGONSKIN, Test.LAP_SHEAR, {"silpoxy": "20.74±1.56", "gamma=0.1": "24.64±6.13",
                                         "gamma=0.3": "34.82±5.29", "gamma=0.5": "30.11±1.12"})
    + _rows(DRAGONSKIN, Test.PEEL, {"silpoxy": "3.72±0.46", "gamma=0.1": "6.09±0.51",
                                    "gamma=0.3": "14.20±2.03", "gamma=0.5": "9.45±2.12"})
    + _rows(ECOFLEX, Test.BALLOON_PRESSURE, {"silpoxy": "5", "gamma=0.3": "8.2±0.4", "gamma=0.5": "7.6±0.8"})
    + _rows(DRAGONSKIN, Test.BALLOON_PRESSURE, {"silpoxy": "<8", "gamma=0.3": "36.6±0.4",
                                                "gamma=0.5": "18.0±2.6"})
    + _rows(ECOFLEX, Test.BALLOON_DEFLECTION, {"gamma=0.3": "46.90±0.66", "gamma=0.5": "40.22±6.84"})
    + _rows(DRAGONSKIN, Test.BALLOON_DEFLECTION, {"silpoxy": "9.54±1.56", "gamma=0.3": "33.14±1.63",
                                                  "gamma=0.5": "14.82±1.90"})
)

# percent improvements of the 30 % coupons over adhesive, as published
PUBLISHED_IMPROVEMENTS = {
    (ECOFLEX, "lap_shear"): 106.2,
    (ECOFLEX, "peel"): 226.5,
    (DRAGONSKIN, "lap_shear"): 68.0,
    (DRAGONSKIN, "peel"): 281.0,
}

# cyclic test on 30 % Ecoflex coupons: peak pressure at the first and last of 1000 cycles
CYCLIC_PRESSURE_KPA = (6.7, 5.7)


def reference_row(material: str, test: str, method: str) -> BondReference:
    key = (normalize_material(material), test, method)
    for row in BOND_REFERENCE:
        if row.key == key:
            return row
    raise AnalysisError(f"no reference value for material={key[0]!r} test={test!r} method={method!r}")


def reference_csv() -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["material", "test", "method", "mean", "std", "upper_bound"])
    for r in BOND_REFERENCE:
        writer.writerow([r.material, r.test, r.method, r.mean_text, r.std_text or "", int(r.upper_bound)])
    return buf.getvalue()


@dataclass(frozen=True)
class Comparison:
    key: tuple[str, str, str]
    computed_mean: float
    computed_std: float
    reference_mean: float
    reference_std: float | None
    upper_bound: bool
    abs_deviation: float
    rel_deviation: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        material, test, method = self.key
        return {
            "material": material, "test": test, "method": method,
            "computed_mean": round(self.computed_mean, 6), "computed_std": round(self.computed_std, 6),
            "reference_mean": self.reference_mean, "reference_std": self.reference_std,
            "upper_bound": self.upper_bound,
            "abs_deviation": round(self.abs_deviation, 6), "rel_deviation": round(self.rel_deviation, 6),
            "tolerance": self.tolerance, "passed": self.passed,
        }


def compare_to_reference(summary: Summary, reference: BondReference | None = None,
                         tolerance: float = 0.05) -> Comparison:
    """Check a computed summary against a published mean.

    Passes when the relative deviation of the means is within
    ``tolerance``; for upper-bound rows the computed mean must stay below
    the bound.
    """
    if reference is None:
        reference = reference_row(summary.material, summary.test, summary.method)
    dev = summary.mean - reference.mean
    rel = abs(dev) / abs(reference.mean)
    passed = summary.mean < reference.mean if reference.upper_bound else rel <= tolerance
    return Comparison(reference.key, summary.mean, summary.std, reference.mean, reference.std,
                      reference.upper_bound, abs(dev), rel, tolerance, passed)


# --------------------------------------------------------------------------
# batch analysis

@dataclass
class BenchReport:
    summaries: list[Summary] = field(default_factory=list)
    improvements: list[dict] = field(default_factory=list)
    comparisons: list[Comparison] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "summaries": [
                {"material": s.material, "test": s.test, "method": s.method,
                 "mean": round(s.mean, 6), "std": round(s.std, 6), "n": s.n}
                for s in self.summaries
            ],
            "improvements": self.improvements,
            "comparisons": [c.to_dict() for c in self.comparisons],
            "errors": dict(sorted(self.errors.items())),
            "notes": self.notes,
        }


def analyze(traces: Iterable[MechTrace], tolerance: float = 0.05,
            errors: dict[str, str] | None = None) -> BenchReport:
    """Group traces by (material, test, method), summarise and compare.

    Improvements are reported for every method against the ``silpoxy``
    group of the same material and test.  Both the relative increase and
    the plain ratio are given since published pressure comparisons use
    either convention.
    """
    report = BenchReport(errors=dict(errors or {}))
    groups: dict[tuple[str, str, str], list[MechTrace]] = {}
    for t in traces:
        groups.setdefault(t.key, []).append(t)
    summaries: dict[tuple[str, str, str], Summary] = {}
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda t: t.label)
        try:
            summaries[key] = summarize(members)
        except AnalysisError as exc:
            report.notes.append(f"{'/'.join(key)}: {exc}")
    report.summaries = list(summaries.values())
    for (material, test, method), s in summaries.items():
        if method == "silpoxy":
            continue
        base = summaries.get((material, test, "silpoxy"))
        if base is None:
            continue
        entry = {
            "material": material, "test": test, "method": method, "baseline": "silpoxy",
            "improvement_percent": round(improvement(s, base), 6),
            "ratio_percent": round(ratio_percent(s.mean, base.mean), 6),
        }
        published = PUBLISHED_IMPROVEMENTS.get((material, test)) if method == "gamma=0.3" else None
        if published is not None:
            entry["published_improvement_percent"] = published
        report.improvements.append(entry)
    for key, s in summaries.items():
        try:
            report.comparisons.append(compare_to_reference(s, tolerance=tolerance))
        except AnalysisError:
            report.notes.append(f"{'/'.join(key)}: no published reference")
    return report


def load_traces(paths: Iterable[str | Path]) -> tuple[list[MechTrace], dict[str, str]]:
    """Load every CSV in ``paths`` (directories are scanned, sorted); collect per-file errors."""
    files: list[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    traces, errors = [], {}
    for f in files:
        try:
            traces.append(load_trace(f))
        except (AnalysisError, OSError, UnicodeDecodeError) as exc:
            errors[str(f)] = str(exc)
    return traces, errors
