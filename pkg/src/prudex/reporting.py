"""Deterministic emitters for the compass document and plot-data CSV files.

Template placeholders are ``{{method.axis}}`` and ``{{method.measure.N}}``
(N = 1..17), plus ``{{method.name}}``. ``method`` is either the method
name or its 1-based position ``mK``. Axis values and marks render as
integers, so the same CompassSpec always yields the same bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import pandas as pd

from .errors import SchemaError, TemplateError, ValidationError
from .scoring import AXES, PRIDE_ORDER

MEASURES = (
    "Profit", "Alpha Decay", "Equity Curve", "Risk", "Risk-adjusted Profit", "Extreme Market",
    "Country", "Asset Type", "Time-Scale", "t-SNE", "Entropy", "Correlation", "Diversity Heatmap",
    "Performance Profile", "Variability", "Rolling Window", "Rank Comparison",
)
MEASURE_COLUMNS = tuple(re.sub(r"[^a-z0-9]+", "_", m.lower()).strip("_") for m in MEASURES)
# which axis each measure sits under on the outer ring
MEASURE_AXIS = ("profitability",) * 3 + ("risk_control",) * 3 + ("universality",) * 3 + \
    ("diversity",) * 4 + ("reliability",) * 4
RING = 50
SCHEMA_VERSION = 1
PLACEHOLDER = re.compile(r"\{\{\s*([^{}]+?)\s*\}\}")
METHOD_NAME = re.compile(r"^[A-Za-z0-9_+\-]+$")


@dataclass(frozen=True)
class CompassEntry:
    name: str
    axes: dict
    marks: tuple

    def __post_init__(self):
        if not METHOD_NAME.match(self.name) or re.fullmatch(r"m\d+", self.name):
            raise ValidationError(f"method name {self.name!r} must be [A-Za-z0-9_+-] and not of the form mN")
        missing = [a for a in AXES if a not in self.axes]
        if missing:
            raise ValidationError(f"{self.name}: missing axes {missing}")
        axes = {}
        for a in AXES:
            v = self.axes[a]
            if isinstance(v, float) and not v.is_integer():
                raise ValidationError(f"{self.name}.{a} = {v} is not an integer")
            v = int(v)
            if not 0 <= v <= 100:
                raise ValidationError(f"{self.name}.{a} = {v} outside [0, 100]")
            axes[a] = v
        if axes["explainability"] != 50:
            raise ValidationError(f"{self.name}: explainability must be 50")
        if len(self.marks) != len(MEASURES):
            raise ValidationError(f"{self.name}: expected {len(MEASURES)} marks, got {len(self.marks)}")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "marks", tuple(bool(m) for m in self.marks))


@dataclass(frozen=True)
class CompassSpec:
    methods: tuple
    title: str = "Compass"
    measures: tuple = field(default=MEASURES)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate method names")
        if tuple(self.measures) != MEASURES:
            raise ValidationError("measure list must match the fixed order")

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "title": self.title,
            "axes": list(AXES),
            "measures": list(MEASURES),
            "methods": [{"name": m.name, "axes": {a: m.axes[a] for a in AXES},
                         "marks": [int(x) for x in m.marks]} for m in self.methods],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompassSpec":
        if d.get("schema") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported compass schema {d.get('schema')!r}")
        if list(d.get("measures", [])) != list(MEASURES) or list(d.get("axes", [])) != list(AXES):
            raise SchemaError("axis or measure list does not match")
        methods = [CompassEntry(m["name"], m["axes"], tuple(m["marks"])) for m in d["methods"]]
        return cls(tuple(methods), d.get("title", "Compass"))


def read_compass_csv(source) -> CompassSpec:
    """Results CSV: method, the six axis columns, then one 0/1 column per measure."""
    df = pd.read_csv(source, dtype={"method": str}, float_precision="round_trip")
    need = ["method", *AXES, *MEASURE_COLUMNS]
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise SchemaError(f"compass CSV missing columns {missing}")
    entries = []
    for row in df.itertuples(index=False):
        r = row._asdict()
        marks = []
        for c in MEASURE_COLUMNS:
            if r[c] not in (0, 1):
                raise SchemaError(f"{r['method']}: measure {c} must be 0 or 1, got {r[c]!r}")
            marks.append(r[c] == 1)
        entries.append(CompassEntry(r["method"], {a: r[a] for a in AXES}, tuple(marks)))
    return CompassSpec(tuple(entries))


def spec_from_axis_scores(axis_df: pd.DataFrame, marks: dict | None = None) -> CompassSpec:
    """CompassSpec from an axis-score table; unlisted methods get every mark."""
    marks = marks or {}
    entries = []
    for row in axis_df.sort_values("method").itertuples(index=False):
        r = row._asdict()
        axes = {a: (0 if isinstance(r[a], float) and math.isnan(r[a]) else r[a]) for a in AXES}
        entries.append(CompassEntry(r["method"], axes, tuple(marks.get(r["method"], (True,) * len(MEASURES)))))
    return CompassSpec(tuple(entries))


def _slots(spec: CompassSpec):
    """Map every accepted placeholder key to (canonical slot, rendered value)."""
    table = {}
    for k, m in enumerate(spec.methods, start=1):
        for alias in (m.name, f"m{k}"):
            table[f"{alias}.name"] = (None, m.name)
            for a in AXES:
                table[f"{alias}.{a}"] = ((m.name, a), str(m.axes[a]))
            for n, flag in enumerate(m.marks, start=1):
                table[f"{alias}.measure.{n}"] = ((m.name, f"measure.{n}"), "1" if flag else "0")
    return table


def emit_compass(spec: CompassSpec, template: str | None = None) -> tuple[str, str]:
    """Fill ``template`` (default: generated for this spec) and build the JSON companion.

    Returns ``(document, companion_json)``. Raises TemplateError listing
    every unknown placeholder and every slot the template leaves out.
    """
    template = default_template(len(spec.methods)) if template is None else template
    table = _slots(spec)
    unknown, covered = [], set()
    for key in PLACEHOLDER.findall(template):
        if key not in table:
            unknown.append(key)
        elif table[key][0] is not None:
            covered.add(table[key][0])
    required = {(m.name, a) for m in spec.methods for a in AXES} | \
        {(m.name, f"measure.{n}") for m in spec.methods for n in range(1, len(MEASURES) + 1)}
    problems = [f"unknown placeholder {{{{{k}}}}}" for k in sorted(set(unknown))]
    problems += [f"missing slot {name}.{slot}" for name, slot in sorted(required - covered)]
    if problems:
        raise TemplateError(problems)
    doc = PLACEHOLDER.sub(lambda mo: table[mo.group(1).strip()][1], template)
    companion = json.dumps(spec.to_dict(), indent=2, sort_keys=False) + "\n"
    return doc, companion


PALETTE = ("red", "blue", "green!60!black", "orange", "violet", "cyan!70!black", "brown", "magenta",
           "olive", "teal", "gray", "black")


def default_template(n_methods: int) -> str:
    """TikZ compass with positional slots m1..mK."""
    lines = [
        r"\documentclass[tikz,border=4pt]{standalone}",
        r"\usetikzlibrary{calc}",
        r"\begin{document}",
        r"\begin{tikzpicture}[scale=0.04]",
        r"% axis grid: outer hexagon = 100, inner marks = 50 (market average)",
    ]
    angles = [90 - 60 * i for i in range(len(AXES))]
    hexagon = " -- ".join(f"({a}:100)" for a in angles) + " -- cycle"
    lines.append(rf"\draw[gray] {hexagon};")
    lines.append(rf"\draw[gray, dashed] {' -- '.join(f'({a}:50)' for a in angles)} -- cycle;")
    for a, axis in zip(angles, AXES):
        label = axis.replace("_", " ").title()
        lines.append(rf"\draw[gray] (0,0) -- ({a}:100) node[pos=1.12, font=\tiny] {{{label}}};")
    for k in range(1, n_methods + 1):
        color = PALETTE[(k - 1) % len(PALETTE)]
        pts = " -- ".join(f"({a}:{{{{m{k}.{axis}}}}})" for a, axis in zip(angles, AXES))
        lines.append(rf"% {{{{m{k}.name}}}}")
        lines.append(rf"\draw[{color}, thick, fill={color}, fill opacity=0.08] {pts} -- cycle;")
    # outer ring: one sector per measure, one concentric track per method
    n_meas = len(MEASURES)
    for j, name in enumerate(MEASURES, start=1):
        ang = 90 - (j - 0.5) * 360 / n_meas
        lines.append(rf"\node[font=\tiny, rotate={ang - 90:.4g}] at ({ang:.4g}:{130 + 4 * n_methods}) {{{name}}};")
    for k in range(1, n_methods + 1):
        color = PALETTE[(k - 1) % len(PALETTE)]
        radius = 115 + 4 * k
        for j in range(1, n_meas + 1):
            ang = 90 - (j - 0.5) * 360 / n_meas
            lines.append(rf"\ifnum{{{{m{k}.measure.{j}}}}}=1 \fill[{color}] ({ang:.4g}:{radius}) circle (1.5);\fi")
    lines.append(r"% legend")
    for k in range(1, n_methods + 1):
        color = PALETTE[(k - 1) % len(PALETTE)]
        lines.append(rf"\node[{color}, anchor=west, font=\tiny] at (170,{100 - 8 * k}) {{{{{{m{k}.name}}}}}};")
    lines += [r"\end{tikzpicture}", r"\end{document}", ""]
    return "\n".join(lines)


def packaged_template() -> str:
    """The shipped eight-method template."""
    return resources.files("prudex").joinpath("templates/compass.tex").read_text()


def _g(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".6g")


def _write(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_pride_star(scores: pd.DataFrame) -> str:
    """method,metric,score rows in the fixed metric order, plus the reference ring at 50."""
    rows = []
    for method in sorted(scores["method"].unique()):
        sub = scores[scores["method"] == method].set_index("metric")["score"]
        for m in PRIDE_ORDER:
            if m not in sub.index:
                raise SchemaError(f"{method}: no score for {m}")
            v = sub[m]
            if not (isinstance(v, float) and math.isnan(v)) and not 0 <= v <= 100:
                raise ValidationError(f"{method}.{m} = {v} outside [0, 100]")
            rows.append([method, m, _g(v)])
    rows += [["market_average_ring", m, str(RING)] for m in PRIDE_ORDER]
    return _write(["method", "metric", "score"], rows)


def emit_heatmap(portfolios: dict, assets, tol: float = 1e-6) -> str:
    """Average portfolio per method; ``assets`` excludes cash, which comes first."""
    header = ["method", "cash", *assets]
    rows = []
    for method in sorted(portfolios):
        w = np.asarray(portfolios[method], dtype=float)
        if w.shape != (len(assets) + 1,):
            raise ValidationError(f"{method}: expected {len(assets) + 1} weights, got {w.shape}")
        if np.any(w < -tol) or abs(w.sum() - 1) > tol:
            raise ValidationError(f"{method}: weights are not on the simplex")
        rows.append([method, *(_g(x) for x in w)])
    return _write(header, rows)


def emit_equity_curves(records) -> str:
    """date,method,mean,std over seeds (sample std; 0 for a single seed)."""
    by_method: dict = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    rows = []
    for method in sorted(by_method):
        recs = sorted(by_method[method], key=lambda r: r.seed)
        dates = recs[0].dates
        for r in recs[1:]:
            if r.dates != dates:
                raise ValidationError(f"{method}: seed {r.seed} calendar differs from seed {recs[0].seed}")
        eq = np.stack([r.equity for r in recs])
        mean = eq.mean(axis=0)
        std = eq.std(axis=0, ddof=1) if len(recs) > 1 else np.zeros_like(mean)
        rows.extend([d, method, _g(m), _g(s)] for d, m, s in zip(dates, mean, std))
    return _write(["date", "method", "mean", "std"], rows)


def average_portfolios(records) -> dict:
    """Per-method time-and-seed average of the held weights."""
    out: dict = {}
    for rec in records:
        out.setdefault(rec.method, []).append(np.asarray(rec.weights).mean(axis=0))
    return {m: np.mean(ws, axis=0) / np.mean(ws, axis=0).sum() for m, ws in out.items()}


def read_equity_csv(source) -> pd.DataFrame:
    return pd.read_csv(source, dtype={"date": str, "method": str}, float_precision="round_trip")

