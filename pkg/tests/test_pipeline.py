import numpy as np
import pytest

from scaffoldkit.cohort import FOR2107_LABELS, make_synthetic_cohort
from scaffoldkit.confidence import delta_table, framing_share
from scaffoldkit.metrics import condition_matrix
from scaffoldkit.pipeline import confidences_by_key, planted_setup, run_conditions, run_phrase_probe, sample_probe_subjects
from scaffoldkit.prompts import phrase_inventory


@pytest.fixture(scope="module")
def setup():
    records, d = make_synthetic_cohort(80, 0.4, seed=5)
    return planted_setup(records, d, FOR2107_LABELS, seed=5)


def test_probe_subjects_seeded_and_positive(setup):
    a = sample_probe_subjects(setup.inputs.records, 10, seed=1)
    assert a == sample_probe_subjects(setup.inputs.records, 10, seed=1)
    assert all(r.label.value.value == "positive" for r in a)
    assert len(sample_probe_subjects(setup.inputs.records, 10_000)) == 32


def test_probe_recovers_direction_and_layer(setup):
    rep = run_phrase_probe(setup.inputs, setup.backend, phrase_inventory(), setup.fork, n_subjects=30)
    assert rep.sweep.divergence_layer == setup.spec.divergence_layer
    assert rep.sweep.l_star == setup.spec.divergence_layer - 1
    assert abs(rep.direction.u @ setup.spec.direction) > 0.99
    by_id = {r.phrase_id: r for r in rep.phrases}
    assert by_id["1"].mean_cosine > 0.9 and by_id["1"].mean_delta > 0
    assert abs(by_id["19"].mean_cosine) < 0.1 and abs(by_id["19"].mean_delta) < 1e-12
    assert rep.fit is not None and rep.fit.a > 0


def test_preceding_layer_sees_no_shift(setup):
    rep = run_phrase_probe(setup.inputs, setup.backend, phrase_inventory()[:3], setup.fork, n_subjects=10, read_layer="preceding")
    assert rep.read_layer == setup.spec.divergence_layer - 1
    # below k the preamble only adds text noise, so the direction is unrelated to v
    assert abs(rep.direction.u @ setup.spec.direction) < 0.9


def test_share_and_matrix(setup):
    obs = run_conditions(setup.inputs, setup.backend, ["C1", "C2", "C4", "C2_weather"], setup.fork)
    rows = delta_table(confidences_by_key(obs))
    share = framing_share(rows[0].mean, rows[1].mean)
    assert share == pytest.approx(setup.planted_share(), abs=1e-9)
    m = condition_matrix(obs)
    assert m.f1("synthetic", "C2") > m.f1("synthetic", "C1")
    assert m.f1("synthetic", "C2_weather") == m.f1("synthetic", "C1")
