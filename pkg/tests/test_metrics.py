import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaffoldkit.backend import ForkObservation
from scaffoldkit.cohort import CohortSummary, LabelValue
from scaffoldkit.metrics import (
    ConditionMatrix,
    MetricsError,
    MetricsRow,
    classification_metrics,
    condition_matrix,
    fixture_matrix,
    reference_values,
)

POS, NEG = LabelValue.POSITIVE, LabelValue.NEGATIVE


def confusion(tp, fp, fn, tn):
    return [(POS, POS)] * tp + [(POS, NEG)] * fp + [(NEG, POS)] * fn + [(NEG, NEG)] * tn


def test_perfect():
    r = classification_metrics(confusion(3, 0, 0, 4))
    assert (r.f1, r.precision, r.recall, r.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_confusion_arithmetic():
    r = classification_metrics(confusion(3, 1, 2, 4))
    assert (r.precision, r.recall, r.accuracy) == pytest.approx((0.75, 0.6, 0.7))
    assert r.f1 == pytest.approx(2 / 3)


def test_published_row_identity():
    p, rec = 1.0, 0.083
    assert 2 * p * rec / (p + rec) == pytest.approx(0.1533, abs=1e-4)


def test_undefined_precision_flag():
    r = classification_metrics(confusion(0, 0, 5, 5))
    assert r.precision == 0.0 and r.precision_undefined and r.f1 == 0.0
    with pytest.raises(MetricsError):
        classification_metrics([])


@settings(deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_against_sklearn(tp, fp, fn, tn):
    from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score

    pairs = confusion(tp, fp, fn, tn)
    if not pairs:
        return
    yhat = [int(a is POS) for a, _ in pairs]
    y = [int(b is POS) for _, b in pairs]
    r = classification_metrics(pairs)
    assert r.precision == pytest.approx(precision_score(y, yhat, zero_division=0))
    assert r.recall == pytest.approx(recall_score(y, yhat, zero_division=0))
    assert r.f1 == pytest.approx(f1_score(y, yhat, zero_division=0))
    assert r.accuracy == pytest.approx(accuracy_score(y, yhat))
    m = classification_metrics(pairs, average="macro")
    assert m.precision == pytest.approx(precision_score(y, yhat, average="macro", labels=[0, 1], zero_division=0))
    assert m.recall == pytest.approx(recall_score(y, yhat, average="macro", labels=[0, 1], zero_division=0))
    if m.precision + m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


@pytest.mark.parametrize("key", ["metrics_for2107", "metrics_oasis3"])
def test_published_tables_satisfy_harmonic_identity(key):
    rows = reference_values()[key]["rows"]
    assert len(rows) == 60
    for r in rows:
        p, rec = r["precision"], r["recall"]
        f1 = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
        assert abs(f1 - r["f1"]) <= 0.001 + 1e-9, r


def test_condition_matrix_and_notice():
    logs = [ForkObservation(f"S{i}", "C1", 0.9 if i % 2 else 0.1, 0.1 if i % 2 else 0.9, "", "m", POS if i % 3 else NEG) for i in range(12)]
    m = condition_matrix(logs, CohortSummary(8, 4), expected_conditions=("C1", "C2"))
    assert len(m) == 1 and m.conditions == ["C1"]
    assert m.notices == ["condition C2 has no runs; omitted"]
    assert m.baseline == pytest.approx((4 / 12) ** 2 + (8 / 12) ** 2)
    assert ConditionMatrix.from_dict(m.to_dict()).rows == m.rows


def test_duplicate_rows_rejected():
    row = MetricsRow("m", "C1", 0.5, 0.5, 0.5, 0.5)
    with pytest.raises(MetricsError):
        ConditionMatrix([row, row])


def test_ablation_fixture_column():
    m = fixture_matrix("ablation:FOR2107")
    model = next(x for x in m.models if "3B" in x and "Qwen" in x)
    assert [m.f1(model, c) for c in ("C2", "C2_fmri", "C2_weather")] == [0.728, 0.702, 0.056]
    assert m.baseline == pytest.approx(0.5218, abs=1e-4)


def test_for2107_fixture_rows():
    m = fixture_matrix("for2107")
    assert len(m) == 60
    assert np.isclose(m.baseline, 0.5218, atol=1e-4)
