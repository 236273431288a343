"""Report tables and their CSV / JSON-lines / Markdown renderings.

Every artifact becomes a ``Table`` (named columns, rows of plain values);
writers format floats with a fixed number of decimals so output bytes
depend only on the artifact contents.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .confidence import DeltaSummary, GroupStats
from .metrics import ConditionMatrix

FORMATS = ("csv", "jsonl", "markdown")
EXTENSIONS = {"csv": "csv", "jsonl": "jsonl", "markdown": "md"}


class ReportError(RuntimeError):
    pass


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    caption: str = ""
    decimals: int = 3


def _cell(v, decimals: int) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{decimals}f}"
    return str(v)


def _json_value(v, decimals: int):
    if isinstance(v, float):
        if not math.isfinite(v):
            return None
        return round(v, decimals)
    return v


def render(table: Table, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v, table.decimals) for v in row])
        return buf.getvalue()
    if fmt == "jsonl":
        lines = [
            json.dumps({c: _json_value(v, table.decimals) for c, v in zip(table.columns, row)}, ensure_ascii=False)
            for row in table.rows
        ]
        return "".join(line + "\n" for line in lines)
    if fmt == "markdown":
        out = []
        if table.caption:
            out += [table.caption, ""]
        out.append("| " + " | ".join(table.columns) + " |")
        out.append("|" + "|".join("---" for _ in table.columns) + "|")
        for row in table.rows:
            out.append("| " + " | ".join(_cell(v, table.decimals) for v in row) + " |")
        return "\n".join(out) + "\n"
    raise ReportError(f"unknown format {fmt!r}")


# artifact -> table


def matrix_table(m: ConditionMatrix, name: str = "condition_matrix") -> Table:
    cap = f"{m.dataset or 'cohort'}: {m.average} F1"
    if m.baseline is not None:
        cap += f"; random baseline F1 = {m.baseline:.3f}"
    rows = [
        (r.model, r.condition, r.f1, r.precision, r.recall, r.accuracy, r.n, r.precision_undefined)
        for r in m.rows
    ]
    return Table(name, ("model", "condition", "f1", "precision", "recall", "accuracy", "n", "precision_undefined"), rows, cap)


def f1_pivot_table(m: ConditionMatrix, conditions: Sequence[str] | None = None, name: str = "f1_by_condition") -> Table:
    """Models as rows, conditions as columns (ablation-table shape)."""
    conds = list(conditions or m.conditions)
    cells = {(r.model, r.condition): r.f1 for r in m.rows}
    rows = [tuple([model] + [cells.get((model, c)) for c in conds]) for model in m.models]
    cap = f"{m.dataset or 'cohort'}: F1 by condition"
    if m.baseline is not None:
        cap += f"; random baseline F1 = {m.baseline:.3f}"
    return Table(name, tuple(["model"] + conds), rows, cap)


def alignment_table(rows: Sequence[Mapping], baseline: float | None = None, name: str = "alignment") -> Table:
    """Before/after comparison rows ``{condition, before, after}``."""
    cap = "F1 before and after preference alignment"
    if baseline is not None:
        cap += f"; random baseline F1 = {baseline:.2f}"
    body = [(r["condition"], r["before"], r["after"], r["after"] - r["before"]) for r in rows]
    return Table(name, ("condition", "before", "after", "change"), body, cap)


def delta_rows_table(rows: Sequence[tuple[str, DeltaSummary]], name: str = "delta_table") -> Table:
    body = [
        (model, d.base, d.target, d.mean, d.std, d.n, "sample" if d.ddof == 1 else "population")
        for model, d in rows
    ]
    return Table(name, ("model", "base", "target", "mean_delta", "std", "n", "std_convention"), body, "Per-subject confidence shift", 3)


def group_stats_table(stats: Sequence[tuple[str, GroupStats]], name: str = "group_stats") -> Table:
    body = [(model, g.condition, g.mean, g.std, g.n, g.convention) for model, g in stats]
    return Table(name, ("model", "condition", "mean_p_pos", "std", "n", "std_convention"), body, "Group mean confidence", 3)


def probe_table(results: Sequence[Mapping], name: str = "probe_phrases") -> Table:
    body = [(r["phrase_id"], r["category"], r["text"], r["mean_cosine"], r["mean_delta"], r.get("n_skipped", 0)) for r in results]
    return Table(name, ("id", "category", "phrase", "cos", "delta", "n_skipped"), body, "Phrase probe: alignment with the scaffold direction and confidence shift", 4)


def fit_table(record: Mapping, name: str = "fit") -> Table:
    keys = ("a", "b", "mse", "n", "tau", "l_star", "divergence_layer", "read_layer", "read_rule", "converged", "b_identified")
    return Table(name, keys, [tuple(record.get(k) for k in keys)], "Scaffold response curve fit", 6)


# plot data


def group_band_series(stats: Sequence[tuple[str, GroupStats]], order: Sequence[str] | None = None) -> Table:
    """Group-mean bands: one series per model; x is the condition index."""
    conds = list(order or sorted({g.condition for _, g in stats}))
    body = []
    for model, g in stats:
        x = conds.index(g.condition) if g.condition in conds else len(conds)
        body.append((model, x, g.condition, g.mean, g.std))
    body.sort(key=lambda r: (r[0], r[1]))
    return Table("plot_group_bands", ("series", "x", "condition", "y", "band"), body, decimals=6)


def probe_scatter(results: Sequence[Mapping]) -> Table:
    body = [(r["mean_cosine"], r["mean_delta"], r["category"], r["phrase_id"]) for r in results]
    return Table("plot_probe_scatter", ("cos", "delta", "category", "id"), body, decimals=6)


def f1_bars(m: ConditionMatrix) -> Table:
    return Table("plot_f1_bars", ("model", "condition", "f1"), [(r.model, r.condition, r.f1) for r in m.rows], decimals=6)


@dataclass
class Artifacts:
    matrix: ConditionMatrix | None = None
    alignment: list[dict] | None = None
    alignment_baseline: float | None = None
    deltas: list[tuple[str, DeltaSummary]] | None = None
    groups: list[tuple[str, GroupStats]] | None = None
    probe: list[dict] | None = None
    fit: dict | None = None
    pivot_conditions: Sequence[str] | None = None

    def tables(self, plot_data: bool = True) -> list[Table]:
        out = []
        if self.matrix is not None:
            out.append(matrix_table(self.matrix))
            out.append(f1_pivot_table(self.matrix, self.pivot_conditions))
            if plot_data:
                out.append(f1_bars(self.matrix))
        if self.alignment is not None:
            out.append(alignment_table(self.alignment, self.alignment_baseline))
        if self.deltas is not None:
            out.append(delta_rows_table(self.deltas))
        if self.groups is not None:
            out.append(group_stats_table(self.groups))
            if plot_data:
                out.append(group_band_series(self.groups))
        if self.probe is not None:
            out.append(probe_table(self.probe))
            if plot_data:
                out.append(probe_scatter(self.probe))
        if self.fit is not None:
            out.append(fit_table(self.fit))
        return out


def emit_report(artifacts: Artifacts | Iterable[Table], out_dir, formats: Sequence[str] = FORMATS, plot_data: bool = True) -> list[Path]:
    """Write every table in every requested format to ``out_dir``."""
    for fmt in formats:
        if fmt not in FORMATS:
            raise ReportError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    tables = artifacts.tables(plot_data) if isinstance(artifacts, Artifacts) else list(artifacts)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ReportError(f"output directory {out} is not writable")
    paths = []
    for table in tables:
        for fmt in formats:
            path = out / f"{table.name}.{EXTENSIONS[fmt]}"
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(render(table, fmt))
            paths.append(path)
    return paths


# artifact persistence between CLI stages


def save_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_artifacts(directory) -> Artifacts:
    """Collect whatever artifact files an earlier stage left in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise ReportError(f"artifact directory {d} does not exist")
    art = Artifacts()

    def read(name):
        p = d / name
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

    if (m := read("matrix.json")) is not None:
        art.matrix = ConditionMatrix.from_dict(m)
        art.pivot_conditions = m.get("pivot_conditions")
    if (a := read("alignment.json")) is not None:
        art.alignment = a["rows"]
        art.alignment_baseline = a.get("random_baseline")
    if (c := read("confidence.json")) is not None:
        art.deltas = [(r["model"], DeltaSummary(r["base"], r["target"], r["mean"], r["std"], r["n"], r["ddof"])) for r in c["deltas"]]
        art.groups = [(r["model"], GroupStats(r["condition"], r["mean"], r["std"], r["n"], r["ddof"])) for r in c["groups"]]
    if (p := read("probe.json")) is not None:
        art.probe = p["phrases"]
        art.fit = p.get("fit")
    return art
