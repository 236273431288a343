import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scaffoldkit.cohort import LabelValue
from scaffoldkit.confidence import (
    ConfidenceError,
    NormalizedConfidence,
    confidence_delta,
    delta_table,
    framing_share,
    group_statistics,
    normalize_confidence,
    paired_deltas,
    predict_label,
    summarize_deltas,
)

probs = st.floats(0.0, 1.0)


def test_examples():
    assert normalize_confidence(0.3, 0.1).P_pos == pytest.approx(0.75)
    assert normalize_confidence(0.2, 0.2).P_pos == pytest.approx(0.5)
    c = normalize_confidence(0.0, 0.0)
    assert (c.P_pos, c.P_neg, c.degenerate) == (0.5, 0.5, True)


def test_rejects_bad_input():
    for bad in ((-0.1, 0.2), (0.2, 1.5), (math.nan, 0.1)):
        with pytest.raises(ConfidenceError):
            normalize_confidence(*bad)


@given(probs, probs)
def test_sum_invariant(p, q):
    c = normalize_confidence(p, q)
    total = c.P_pos + c.P_neg
    assert total <= 1.0 and 0.0 <= c.P_pos <= 1.0
    s = p + q
    if c.degenerate:
        assert s < 1e-9 and total == 1.0
    else:
        # the shortfall is eps / (s + eps); it stays under 1e-9 once s >= 1e-3
        assert 1.0 - total == pytest.approx(c.epsilon / (s + c.epsilon), abs=1e-15)
        if s >= 1e-3:
            assert total >= 1 - 1e-9


def test_sum_shortfall_between_floor_and_1e3():
    c = normalize_confidence(1e-6, 1e-6)
    assert not c.degenerate
    assert 1e-9 < 1.0 - (c.P_pos + c.P_neg) < 1e-6


@given(st.floats(1e-6, 1.0), probs, st.floats(0.01, 1.0))
def test_scale_invariant_prediction(p, q, k):
    assert predict_label(normalize_confidence(p, q)) == predict_label(normalize_confidence(p * k, q * k))


def test_prediction_and_tie():
    assert predict_label(NormalizedConfidence(0.9, 0.1)) is LabelValue.POSITIVE
    assert predict_label(NormalizedConfidence(0.5, 0.5)) is LabelValue.NEGATIVE
    assert predict_label(normalize_confidence(0.4, 0.4)) is LabelValue.NEGATIVE


def test_delta_examples():
    d = confidence_delta(NormalizedConfidence(0.2, 0.8), NormalizedConfidence(0.9, 0.1), "S", "C1", "C2")
    assert d.delta == pytest.approx(0.7)
    same = NormalizedConfidence(0.4, 0.6)
    assert confidence_delta(same, same, "S", "C1", "C1").delta == 0.0
    with pytest.raises(ConfidenceError):
        confidence_delta(same, same, "S", "C1", "C2", target_subject="T")


@given(probs, probs, probs, probs, probs, probs)
def test_telescoping_and_antisymmetry(a1, a2, b1, b2, c1, c2):
    a, b, c = normalize_confidence(a1, a2), normalize_confidence(b1, b2), normalize_confidence(c1, c2)
    ab = confidence_delta(a, b, "S", "A", "B").delta
    bc = confidence_delta(b, c, "S", "B", "C").delta
    ac = confidence_delta(a, c, "S", "A", "C").delta
    ba = confidence_delta(b, a, "S", "B", "A").delta
    assert ab == -ba
    assert ab + bc == pytest.approx(ac, abs=1e-15)


def test_group_statistics():
    assert group_statistics([0.4, 0.6], "C1").mean == pytest.approx(0.5)
    assert group_statistics([0.7], "C1").std == 0.0
    rng = np.random.default_rng(1)
    vals = rng.random(1000)
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    g = group_statistics(list(vals), "C1")
    assert abs(g.mean - mean) < 1e-12 and abs(g.std - math.sqrt(var)) < 1e-12
    assert g.convention == "population"
    with pytest.raises(ConfidenceError):
        group_statistics([], "C1")


def test_paired_delta_table():
    conf = {}
    for i, (p1, p2, p4) in enumerate([(0.2, 0.5, 0.6), (0.4, 0.6, 0.9), (0.3, 0.3, 0.3)]):
        for tag, p in (("C1", p1), ("C2", p2), ("C4", p4)):
            conf[(f"S{i}", tag)] = NormalizedConfidence(p, 1 - p)
    conf[("S9", "C2")] = NormalizedConfidence(0.9, 0.1)  # unpaired, ignored
    rows = delta_table(conf)
    assert [(r.base, r.target, r.n) for r in rows] == [("C1", "C2", 3), ("C1", "C4", 3), ("C2", "C4", 3)]
    assert rows[0].mean == pytest.approx((0.3 + 0.2 + 0.0) / 3)
    assert rows[0].mean + rows[2].mean == pytest.approx(rows[1].mean)
    assert rows[0].std == pytest.approx(np.std([0.3, 0.2, 0.0], ddof=1))
    with pytest.raises(ConfidenceError):
        summarize_deltas(paired_deltas(conf, "C1", "C3"))


def test_framing_share():
    assert framing_share(0.458, 0.636) == pytest.approx(0.72, abs=0.001)
    with pytest.raises(ConfidenceError):
        framing_share(0.1, 0.0)
