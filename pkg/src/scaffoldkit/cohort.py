"""Cohort ingestion, record serialization and class statistics.

Dictionary files are JSON::

    {
      "cohort": {"subject_column": "Proband", "timestamp_column": "Datum_Interview",
                 "label_column": "Group", "positive_values": ["MDD"],
                 "positive_name": "Major Depressive Disorder", "negative_name": "Control",
                 "exclude": ["Suizidgedanken"], "delimiter": ","},
      "variables": [
        {"name": "Alter", "description": "Age", "units": "years"},
        {"name": "Geschlecht", "description": "Gender", "value_map": {"1": "male", "2": "female"}}
      ]
    }

Variable order in ``variables`` is the serialization order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "n/a", "nan", "none", "null", "-"})
NOT_REPORTED = "not reported"
RECORD_HEADER = "Patient clinical information:"


class CohortError(ValueError):
    pass


class SchemaError(CohortError):
    pass


class DegenerateCohortError(CohortError):
    pass


class LabelValue(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class ClassLabel:
    """A binary label set, optionally carrying one subject's value."""

    positive_name: str
    negative_name: str
    value: LabelValue | None = None

    def __post_init__(self):
        if self.positive_name == self.negative_name:
            raise CohortError("positive and negative label names must differ")
        if self.value is not None:
            object.__setattr__(self, "value", LabelValue(self.value))

    def with_value(self, value) -> "ClassLabel":
        return ClassLabel(self.positive_name, self.negative_name, LabelValue(value))

    def name_of(self, value) -> str:
        return self.positive_name if LabelValue(value) is LabelValue.POSITIVE else self.negative_name

    @property
    def name(self) -> str:
        if self.value is None:
            raise CohortError("label set carries no value")
        return self.name_of(self.value)


FOR2107_LABELS = ClassLabel("Major Depressive Disorder", "Control")
OASIS3_LABELS = ClassLabel("Cognitive Decline", "Cognitive Normal")


@dataclass(frozen=True)
class DictEntry:
    description: str
    value_map: Mapping[str, str] | None = None
    units: str | None = None


@dataclass
class CohortConfig:
    subject_column: str = "subject_id"
    timestamp_column: str | None = None
    label_column: str = "label"
    positive_values: tuple[str, ...] = ("1",)
    positive_name: str = "positive"
    negative_name: str = "negative"
    exclude: tuple[str, ...] = ()
    delimiter: str = ","
    decimals: int = 2

    @property
    def labels(self) -> ClassLabel:
        return ClassLabel(self.positive_name, self.negative_name)


@dataclass
class DataDictionary:
    entries: dict[str, DictEntry]
    config: CohortConfig = field(default_factory=CohortConfig)

    def __post_init__(self):
        for name, entry in self.entries.items():
            if not entry.description or not entry.description.strip():
                raise SchemaError(f"dictionary entry {name!r} has an empty description")

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> list[str]:
        return list(self.entries)

    @classmethod
    def from_json(cls, path) -> "DataDictionary":
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(spec)

    @classmethod
    def from_dict(cls, spec: Mapping) -> "DataDictionary":
        entries = {}
        for item in spec.get("variables", []):
            name = item["name"]
            if name in entries:
                raise SchemaError(f"duplicate dictionary entry {name!r}")
            vmap = item.get("value_map")
            entries[name] = DictEntry(
                description=item.get("description", ""),
                value_map={str(k): str(v) for k, v in vmap.items()} if vmap else None,
                units=item.get("units"),
            )
        cfg = dict(spec.get("cohort", {}))
        for key in ("positive_values", "exclude"):
            if key in cfg:
                cfg[key] = tuple(str(v) for v in cfg[key])
        return cls(entries=entries, config=CohortConfig(**cfg))


@dataclass(frozen=True)
class PatientRecord:
    subject_id: str
    variables: Mapping[str, object]
    label: ClassLabel
    volume_ref: str | None = None


@dataclass(frozen=True)
class CohortSummary:
    n_positive: int
    n_negative: int

    def __post_init__(self):
        if self.n_positive < 1 or self.n_negative < 1:
            raise DegenerateCohortError(
                f"cohort needs both classes (positive={self.n_positive}, negative={self.n_negative})"
            )

    @property
    def n(self) -> int:
        return self.n_positive + self.n_negative

    @property
    def p(self) -> float:
        """Minority-class fraction."""
        return min(self.n_positive, self.n_negative) / self.n


@dataclass
class LoadReport:
    unknown_variables: list[str] = field(default_factory=list)
    dropped_duplicates: list[tuple[str, str]] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        return json.dumps(
            {
                "unknown_variables": sorted(self.unknown_variables),
                "dropped_duplicates": [list(x) for x in self.dropped_duplicates],
                "excluded": sorted(self.excluded),
            },
            indent=2,
        )


def is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip().lower() in MISSING_TOKENS


def _parse_time(raw: str):
    raw = (raw or "").strip()
    for parse in (datetime.fromisoformat, lambda s: datetime.strptime(s, "%d.%m.%Y")):
        try:
            return parse(raw)
        except ValueError:
            continue
    try:
        return float(raw)
    except ValueError:
        return raw


def _read_rows(path: Path, delimiter: str) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter=delimiter)
        header = list(reader.fieldnames or [])
        rows = list(reader)
    return header, rows


def load_cohort(
    records_file,
    dictionary_file,
    label_column: str | None = None,
    config: CohortConfig | None = None,
    report: LoadReport | None = None,
) -> tuple[list[PatientRecord], DataDictionary, CohortSummary]:
    """Load one or more delimiter-separated files into patient records.

    Several rows for the same subject (within or across files) collapse to
    one record: rows are ordered by the configured timestamp column and,
    per variable, the most recent non-missing value wins.
    """
    dictionary = dictionary_file if isinstance(dictionary_file, DataDictionary) else DataDictionary.from_json(dictionary_file)
    cfg = config or dictionary.config
    label_column = label_column or cfg.label_column
    report = report if report is not None else LoadReport()
    paths = [records_file] if isinstance(records_file, (str, Path)) else list(records_file)

    tagged = []
    seen_label = False
    for file_idx, path in enumerate(paths):
        header, rows = _read_rows(Path(path), cfg.delimiter)
        if cfg.subject_column not in header:
            raise SchemaError(f"{path}: subject column {cfg.subject_column!r} missing")
        seen_label = seen_label or label_column in header
        for row_idx, row in enumerate(rows):
            ts = _parse_time(row.get(cfg.timestamp_column, "")) if cfg.timestamp_column else 0
            tagged.append((file_idx, row_idx, ts, row))
    if not seen_label:
        raise SchemaError(f"label column {label_column!r} not present in any records file")

    by_subject: dict[str, list] = {}
    for item in tagged:
        sid = item[3][cfg.subject_column].strip()
        by_subject.setdefault(sid, []).append(item)

    excluded = set(cfg.exclude)
    reserved = {cfg.subject_column, label_column}
    if cfg.timestamp_column:
        reserved.add(cfg.timestamp_column)
    unknown: set[str] = set()
    labels = cfg.labels
    positives = {v.strip().lower() for v in cfg.positive_values}

    records = []
    for sid, items in by_subject.items():
        # oldest first so later rows overwrite; stable on file/row order
        items.sort(key=lambda t: (_sort_key(t[2]), t[0], t[1]))
        merged: dict[str, object] = {}
        for _, _, _, row in items:
            for col, val in row.items():
                if col is None or is_missing(val):
                    continue
                merged[col] = val.strip()
        for _, _, ts, _ in items[:-1]:
            report.dropped_duplicates.append((sid, str(ts)))
        if label_column not in merged:
            raise SchemaError(f"subject {sid!r} has no value in label column {label_column!r}")
        raw_label = str(merged.pop(label_column)).lower()
        value = LabelValue.POSITIVE if raw_label in positives else LabelValue.NEGATIVE
        variables = {}
        for col, val in merged.items():
            if col in reserved:
                continue
            if col in excluded:
                if col not in report.excluded:
                    report.excluded.append(col)
                continue
            if col not in dictionary:
                unknown.add(col)
            variables[col] = val
        records.append(PatientRecord(subject_id=sid, variables=variables, label=labels.with_value(value)))

    report.unknown_variables = sorted(unknown)
    if unknown:
        logger.info("variables without dictionary entry: %s", ", ".join(sorted(unknown)))
    summary = class_distribution(records)
    return records, dictionary, summary


def _sort_key(ts):
    # mixed types (dates vs. raw strings) must still order deterministically
    if isinstance(ts, datetime):
        return (0, ts.isoformat())
    if isinstance(ts, date):
        return (0, ts.isoformat())
    if isinstance(ts, (int, float)):
        return (1, f"{float(ts):030.6f}")
    return (2, str(ts))


def format_value(value, decimals: int = 2) -> str:
    """Locale-independent rendering: integral numbers without decimals,
    other numbers with a fixed number of decimals, text unchanged."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _format_float(value, decimals)
    text = str(value).strip()
    try:
        num = float(text)
    except ValueError:
        return text
    if not math.isfinite(num):
        return text
    return _format_float(num, decimals)


def _format_float(num: float, decimals: int) -> str:
    if num.is_integer():
        return str(int(num))
    return f"{num:.{decimals}f}"


def _canonical_key(value) -> str:
    return format_value(value, decimals=6)


def serialize_record(
    record: PatientRecord,
    dictionary: DataDictionary,
    missing: str = "placeholder",
    unknown_report: list | None = None,
    header: str = RECORD_HEADER,
) -> str:
    """Render a record as ``description: value`` lines in dictionary order.

    ``missing="placeholder"`` writes ``description: not reported`` for
    dictionary variables without a value; ``missing="omit"`` drops them.
    Variables absent from the dictionary follow, sorted, under their raw
    names and are appended to ``unknown_report`` when given.
    """
    if missing not in ("placeholder", "omit"):
        raise ValueError(f"unknown missing policy {missing!r}")
    decimals = dictionary.config.decimals
    lines = [header]
    for name, entry in dictionary.entries.items():
        raw = record.variables.get(name)
        if is_missing(raw):
            if missing == "placeholder":
                lines.append(f"{entry.description}: {NOT_REPORTED}")
            continue
        if entry.value_map and _canonical_key(raw) in entry.value_map:
            rendered = entry.value_map[_canonical_key(raw)]
        elif entry.value_map and str(raw).strip() in entry.value_map:
            rendered = entry.value_map[str(raw).strip()]
        else:
            rendered = format_value(raw, decimals)
            if entry.units:
                rendered = f"{rendered} {entry.units}"
        lines.append(f"{entry.description}: {rendered}")
    for name in sorted(k for k in record.variables if k not in dictionary):
        raw = record.variables[name]
        if is_missing(raw):
            continue
        if unknown_report is not None:
            unknown_report.append(name)
        lines.append(f"{name}: {format_value(raw, decimals)}")
    return "\n".join(lines)


def class_distribution(records: Sequence[PatientRecord]) -> CohortSummary:
    if not records:
        raise CohortError("class distribution of an empty cohort")
    n_pos = sum(1 for r in records if r.label.value is LabelValue.POSITIVE)
    return CohortSummary(n_positive=n_pos, n_negative=len(records) - n_pos)


def random_baseline_f1(summary: CohortSummary | float) -> float:
    """Expected weighted F1 of a classifier guessing each class at its prior."""
    p = summary.p if isinstance(summary, CohortSummary) else float(summary)
    return p * p + (1.0 - p) * (1.0 - p)


def make_synthetic_cohort(
    n: int = 200,
    positive_fraction: float = 0.4,
    seed: int = 0,
    labels: ClassLabel = FOR2107_LABELS,
) -> tuple[list[PatientRecord], DataDictionary]:
    """Fixture cohort with a handful of demographic and questionnaire items.

    Exactly ``round(n * positive_fraction)`` subjects are positive; the
    positive subjects are drawn by a seeded shuffle.
    """
    rng = random.Random(seed)
    n_pos = round(n * positive_fraction)
    flags = [True] * n_pos + [False] * (n - n_pos)
    rng.shuffle(flags)
    dictionary = DataDictionary.from_dict(
        {
            "cohort": {
                "subject_column": "Proband",
                "label_column": "Group",
                "positive_values": ["1"],
                "positive_name": labels.positive_name,
                "negative_name": labels.negative_name,
            },
            "variables": [
                {"name": "Alter", "description": "Age", "units": "years"},
                {"name": "Geschlecht", "description": "Gender", "value_map": {"1": "male", "2": "female"}},
                {"name": "Bildungsjahre", "description": "Year of education"},
                {"name": "BMI", "description": "Body mass index"},
                {"name": "RS258", "description": "I like myself."},
                {"name": "FSozU12", "description": "I often feel like an outsider."},
                {"name": "PSS1sf", "description": "In the last month, how often did you feel upset?"},
            ],
        }
    )
    records = []
    width = len(str(n))
    for i, positive in enumerate(flags):
        shift = 1 if positive else 0
        variables = {
            "Alter": rng.randint(18, 65),
            "Geschlecht": rng.choice([1, 2]),
            "Bildungsjahre": rng.randint(9, 18),
            "BMI": round(rng.uniform(18.5, 32.0), 1),
            "RS258": min(7, max(1, rng.randint(3, 7) - 2 * shift)),
            "FSozU12": min(5, max(1, rng.randint(1, 3) + shift)),
            "PSS1sf": min(4, max(0, rng.randint(0, 2) + shift)),
        }
        value = LabelValue.POSITIVE if positive else LabelValue.NEGATIVE
        records.append(PatientRecord(f"S{i:0{width}d}", variables, labels.with_value(value)))
    return records, dictionary


def write_cohort_csv(records: Iterable[PatientRecord], dictionary: DataDictionary, path, label_column: str = "Group") -> None:
    """Write records back to the tabular input format (positive label as ``1``)."""
    records = list(records)
    cfg = dictionary.config
    columns = [cfg.subject_column, label_column] + dictionary.order
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter=cfg.delimiter, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            label = "1" if rec.label.value is LabelValue.POSITIVE else "0"
            writer.writerow([rec.subject_id, label] + [format_value(rec.variables.get(c, ""), 6) for c in dictionary.order])
