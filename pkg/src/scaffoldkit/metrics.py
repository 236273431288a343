"""Classification metrics and per-model condition matrices."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .backend import ForkObservation
from .cohort import CohortSummary, LabelValue, random_baseline_f1

logger = logging.getLogger(__name__)

CONDITION_ORDER = ("C1", "C2", "C3", "C4", "C5", "C2_fmri", "C2_weather")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    model: str
    condition: str
    f1: float
    precision: float
    recall: float
    accuracy: float
    n: int = 0
    average: str = "binary"
    precision_undefined: bool = False
    recall_undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _prf(tp: int, fp: int, fn: int):
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    p = 0.0 if p_undef else tp / (tp + fp)
    r = 0.0 if r_undef else tp / (tp + fn)
    return p, r, p_undef, r_undef


def _harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def classification_metrics(
    pairs: Sequence[tuple], positive=LabelValue.POSITIVE, average: str = "binary", model: str = "", condition: str = ""
) -> MetricsRow:
    """Metrics over ``(predicted, true)`` pairs.

    ``binary`` scores the positive class. ``macro`` averages precision and
    recall over both classes and reports F1 as their harmonic mean, so
    F1 = 2PR/(P+R) holds for every row. Undefined precision (no positive
    predictions) or recall is reported as 0 with a flag.
    """
    if not len(pairs):
        raise MetricsError("no predictions")
    if average not in ("binary", "macro"):
        raise MetricsError(f"unknown averaging {average!r}")
    pos = positive
    if isinstance(positive, str) and positive in {v.value for v in LabelValue}:
        pos = LabelValue(positive)
    n = len(pairs)
    correct = sum(1 for yhat, y in pairs if yhat == y)
    tp = sum(1 for yhat, y in pairs if yhat == pos and y == pos)
    fp = sum(1 for yhat, y in pairs if yhat == pos and y != pos)
    fn = sum(1 for yhat, y in pairs if yhat != pos and y == pos)
    tn = n - tp - fp - fn
    p, r, p_undef, r_undef = _prf(tp, fp, fn)
    if average == "macro":
        # the other class as positive: tn plays the role of tp
        p2, r2, p2_undef, r2_undef = _prf(tn, fn, fp)
        p, r = (p + p2) / 2.0, (r + r2) / 2.0
        p_undef, r_undef = p_undef or p2_undef, r_undef or r2_undef
    return MetricsRow(
        model=model,
        condition=condition,
        f1=_harmonic(p, r),
        precision=p,
        recall=r,
        accuracy=correct / n,
        n=n,
        average=average,
        precision_undefined=p_undef,
        recall_undefined=r_undef,
    )


def _condition_key(tag: str):
    return (CONDITION_ORDER.index(tag), tag) if tag in CONDITION_ORDER else (len(CONDITION_ORDER), tag)


@dataclass
class ConditionMatrix:
    rows: list[MetricsRow]
    baseline: float | None = None
    dataset: str = ""
    average: str = "binary"
    notices: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            key = (r.model, r.condition)
            if key in seen:
                raise MetricsError(f"duplicate row for model {r.model!r}, condition {r.condition!r}")
            seen.add(key)
        self.rows = sorted(self.rows, key=lambda r: (r.model, _condition_key(r.condition)))

    def __len__(self) -> int:
        return len(self.rows)

    def get(self, model: str, condition: str) -> MetricsRow:
        for r in self.rows:
            if r.model == model and r.condition == condition:
                return r
        raise KeyError((model, condition))

    def f1(self, model: str, condition: str) -> float:
        return self.get(model, condition).f1

    @property
    def models(self) -> list[str]:
        return sorted({r.model for r in self.rows})

    @property
    def conditions(self) -> list[str]:
        return sorted({r.condition for r in self.rows}, key=_condition_key)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "average": self.average,
            "baseline": self.baseline,
            "notices": list(self.notices),
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConditionMatrix":
        return cls(
            rows=[MetricsRow(**r) for r in d.get("rows", [])],
            baseline=d.get("baseline"),
            dataset=d.get("dataset", ""),
            average=d.get("average", "binary"),
            notices=list(d.get("notices", [])),
        )


def condition_matrix(
    logs: Iterable[ForkObservation],
    summary: CohortSummary | None = None,
    dataset: str = "",
    average: str = "binary",
    expected_conditions: Sequence[str] = (),
) -> ConditionMatrix:
    """One row per (model, condition) in ``logs``; expected conditions with
    no runs are omitted and noted."""
    groups: dict[tuple[str, str], list[tuple]] = {}
    for obs in logs:
        if obs.label is None:
            raise MetricsError(f"observation {obs.subject_id}/{obs.condition} carries no ground-truth label")
        groups.setdefault((obs.model_id, obs.condition), []).append((obs.predicted, obs.label))
    rows = [classification_metrics(pairs, average=average, model=m, condition=c) for (m, c), pairs in groups.items()]
    notices = []
    present = {c for _, c in groups}
    for tag in expected_conditions:
        if tag not in present:
            msg = f"condition {tag} has no runs; omitted"
            logger.warning(msg)
            notices.append(msg)
    baseline = random_baseline_f1(summary) if summary is not None else None
    return ConditionMatrix(rows=rows, baseline=baseline, dataset=dataset, average=average, notices=notices)


# published tables shipped as fixtures


def reference_values() -> dict:
    return json.loads(resources.files("scaffoldkit.data").joinpath("reference_values.json").read_text(encoding="utf-8"))


def fixture_matrix(name: str) -> ConditionMatrix:
    """``for2107`` / ``oasis3`` full metrics or ablation F1
    (one matrix per cohort: ``ablation:FOR2107``, ``ablation:OASIS-3``)."""
    t = reference_values()
    if name in ("for2107", "oasis3"):
        key = "metrics_for2107" if name == "for2107" else "metrics_oasis3"
        dataset = "FOR2107" if name == "for2107" else "OASIS-3"
        counts = t["class_counts"][dataset]
        rows = [MetricsRow(average=t[key]["average"], **r) for r in t[key]["rows"]]
        return ConditionMatrix(rows, random_baseline_f1(CohortSummary(counts["positive"], counts["negative"])), dataset, t[key]["average"])
    if name.startswith("ablation:"):
        dataset = name.split(":", 1)[1]
        spec = t["ablation_f1"]
        rows = []
        for r in spec["rows"]:
            if r["cohort"] != dataset:
                continue
            for cond, f1 in zip(spec["conditions"], r["f1"]):
                # only F1 is published for the ablation
                rows.append(MetricsRow(r["model"], cond, f1, float("nan"), float("nan"), float("nan")))
        if not rows:
            raise MetricsError(f"no ablation rows for cohort {dataset!r}")
        counts = t["class_counts"][dataset]
        return ConditionMatrix(rows, random_baseline_f1(CohortSummary(counts["positive"], counts["negative"])), dataset)
    raise MetricsError(f"unknown fixture {name!r}")
