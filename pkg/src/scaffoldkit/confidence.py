"""Normalised label confidence, predictions, per-subject shifts and group
statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import ClassLabel, LabelValue

EPSILON = 1e-12
DEGENERACY_FLOOR = 1e-9


class ConfidenceError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedConfidence:
    P_pos: float
    P_neg: float
    degenerate: bool = False
    epsilon: float = EPSILON


def normalize_confidence(p_pos: float, p_neg: float, epsilon: float = EPSILON, floor: float = DEGENERACY_FLOOR) -> NormalizedConfidence:
    """P = p / (p_pos + p_neg + eps). Mass below ``floor`` is degenerate and
    maps to 0.5 / 0.5 with the flag set."""
    for name, v in (("p_pos", p_pos), ("p_neg", p_neg)):
        if not math.isfinite(v) or v < 0.0 or v > 1.0:
            raise ConfidenceError(f"{name} must lie in [0, 1], got {v}")
    s = p_pos + p_neg
    if s < floor:
        return NormalizedConfidence(0.5, 0.5, degenerate=True, epsilon=epsilon)
    z = s + epsilon
    return NormalizedConfidence(p_pos / z, p_neg / z, degenerate=False, epsilon=epsilon)


def predict_label(conf: NormalizedConfidence, labels: ClassLabel | None = None) -> LabelValue:
    """Argmax over the two labels; an exact tie goes to the negative class."""
    return LabelValue.POSITIVE if conf.P_pos > conf.P_neg else LabelValue.NEGATIVE


@dataclass(frozen=True)
class DeltaRecord:
    subject_id: str
    base: str
    target: str
    delta: float


def confidence_delta(
    base: NormalizedConfidence,
    target: NormalizedConfidence,
    subject_id: str,
    base_condition: str,
    target_condition: str,
    target_subject: str | None = None,
) -> DeltaRecord:
    if target_subject is not None and target_subject != subject_id:
        raise ConfidenceError(f"subject mismatch: {subject_id!r} vs {target_subject!r}")
    return DeltaRecord(subject_id, base_condition, target_condition, target.P_pos - base.P_pos)


@dataclass(frozen=True)
class GroupStats:
    condition: str
    mean: float
    std: float
    n: int
    ddof: int = 0

    @property
    def convention(self) -> str:
        return "population" if self.ddof == 0 else "sample"


def group_statistics(confidences: Sequence[NormalizedConfidence | float], condition: str, ddof: int = 0) -> GroupStats:
    """Mean and standard deviation of P_pos; ``ddof=0`` (population) for
    group bands, ``ddof=1`` for table-style spreads."""
    if not len(confidences):
        raise ConfidenceError(f"no confidences for condition {condition!r}")
    vals = np.array([c.P_pos if isinstance(c, NormalizedConfidence) else float(c) for c in confidences], dtype=np.float64)
    std = float(vals.std(ddof=ddof)) if vals.size > ddof else 0.0
    return GroupStats(condition, float(vals.mean()), std, int(vals.size), ddof)


def paired_deltas(
    conf: Mapping[tuple[str, str], NormalizedConfidence], base: str, target: str
) -> list[DeltaRecord]:
    """Deltas for every subject observed under both conditions, sorted by
    subject id. ``conf`` maps (subject_id, condition) to a confidence."""
    subjects = sorted({s for s, c in conf if c == base} & {s for s, c in conf if c == target})
    return [confidence_delta(conf[(s, base)], conf[(s, target)], s, base, target) for s in subjects]


@dataclass(frozen=True)
class DeltaSummary:
    base: str
    target: str
    mean: float
    std: float
    n: int
    ddof: int = 1


def summarize_deltas(records: Sequence[DeltaRecord], ddof: int = 1) -> DeltaSummary:
    if not records:
        raise ConfidenceError("no paired subjects")
    vals = np.array([r.delta for r in records])
    std = float(vals.std(ddof=ddof)) if vals.size > ddof else 0.0
    return DeltaSummary(records[0].base, records[0].target, float(vals.mean()), std, int(vals.size), ddof)


DELTA_PAIRS = (("C1", "C2"), ("C1", "C4"), ("C2", "C4"))


def delta_table(conf: Mapping[tuple[str, str], NormalizedConfidence], pairs: Iterable[tuple[str, str]] = DELTA_PAIRS, ddof: int = 1) -> list[DeltaSummary]:
    return [summarize_deltas(paired_deltas(conf, b, t), ddof=ddof) for b, t in pairs]


def framing_share(mean_preamble: float, mean_full: float) -> float:
    """Fraction of the full multimodal shift already produced by the
    preamble alone: mean d(C2<-C1) / mean d(C4<-C1)."""
    if mean_full == 0.0:
        raise ConfidenceError("full-condition mean shift is zero; share undefined")
    return mean_preamble / mean_full
