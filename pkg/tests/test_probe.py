import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaffoldkit.metrics import reference_values
from scaffoldkit.probe import (
    DegenerateFitError,
    NoDivergenceError,
    ResponseCurveFit,
    UndefinedAlignmentError,
    ZeroDirectionError,
    fit_response_curve,
    phrase_alignment,
    predict_response,
    scaffold_direction,
    select_probe_layer,
)


def test_direction_hand_example():
    d = scaffold_direction([[1.0, 0.0]], [[0.0, 1.0]], layer=3)
    np.testing.assert_allclose(d.u, [1 / math.sqrt(2), -1 / math.sqrt(2)])
    assert d.raw_norm == pytest.approx(math.sqrt(2))
    with pytest.raises(ZeroDirectionError):
        scaffold_direction([[1.0, 2.0]], [[1.0, 2.0]], layer=0)


@given(st.integers(0, 2**31))
def test_direction_is_unit(seed):
    rng = np.random.default_rng(seed)
    d = scaffold_direction(rng.normal(size=(5, 6)), rng.normal(size=(5, 6)), layer=1)
    assert np.linalg.norm(d.u) == pytest.approx(1.0)


def test_alignment_examples():
    u = scaffold_direction([[1.0, 0.0]], [[0.0, 0.0]], 0)
    base = np.zeros((3, 2))
    assert phrase_alignment([[2, 0], [5, 0], [0.1, 0]], base, u).mean_cosine == pytest.approx(1.0)
    assert phrase_alignment([[0, 2], [0, -1], [0, 3]], base, u).mean_cosine == pytest.approx(0.0)
    assert phrase_alignment([[1, 1]], [[0, 0]], u).mean_cosine == pytest.approx(1 / math.sqrt(2))
    res = phrase_alignment([[1, 0], [0, 0]], [[0, 0], [0, 0]], u)
    assert res.n_skipped == 1
    with pytest.raises(UndefinedAlignmentError):
        phrase_alignment([[0, 0]], [[0, 0]], u)


@given(st.integers(0, 2**31))
def test_alignment_bounded(seed):
    rng = np.random.default_rng(seed)
    u = scaffold_direction(rng.normal(size=(1, 4)), np.zeros((1, 4)), 0)
    r = phrase_alignment(rng.normal(size=(7, 4)), rng.normal(size=(7, 4)), u)
    assert -1.0 <= r.mean_cosine <= 1.0


def test_layer_rule():
    sweep = [(0.3, 0.3)] * 5 + [(0.3, 0.7)] * 3
    r = select_probe_layer(sweep, tau=0.1)
    assert (r.divergence_layer, r.l_star, r.at_input) == (5, 4, False)
    r0 = select_probe_layer([(0.1, 0.9)], tau=0.1)
    assert (r0.l_star, r0.at_input) == (0, True)
    with pytest.raises(NoDivergenceError):
        select_probe_layer([(0.0, 0.0)] * 4)


def test_published_layer_metadata_under_rule():
    meta = reference_values()["probe_metadata"]
    sweep = [(0.5, 0.5)] * meta["divergence_layer"] + [(0.5, 0.8)] * 3
    assert select_probe_layer(sweep).l_star == meta["divergence_layer"] - 1


def fit(a, b):
    return ResponseCurveFit(a, b, 0.0, 0)


def test_response_values():
    assert predict_response(fit(4, -2), 0.5) == pytest.approx(0.38080, abs=1e-5)
    for a, b in ((3, 1), (-7, 2), (0.2, -5)):
        assert predict_response(fit(a, b), 0.0) == 0.0
    assert np.all(predict_response(fit(0, 1.5), np.linspace(-1, 1, 9)) == 0.0)


@given(st.floats(0.01, 20), st.floats(-6, 6))
def test_response_monotone_in_cos(a, b):
    grid = np.linspace(-1, 1, 50)
    assert np.all(np.diff(predict_response(fit(a, b), grid)) >= 0)


def dense_grid_oracle(cos, delta, center, half=0.05, step=0.0005):
    """Independent brute-force minimiser on a fine grid around ``center``."""
    a = np.arange(center[0] - half, center[0] + half + step / 2, step)
    b = np.arange(center[1] - half, center[1] + half + step / 2, step)
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    pred = sig(a[:, None, None] * cos + b[None, :, None]) - sig(b)[None, :, None]
    mse = ((pred - delta) ** 2).mean(axis=2)
    i, j = np.unravel_index(np.argmin(mse), mse.shape)
    return a[i], b[j]


def test_noiseless_recovery_against_oracle():
    cos = np.linspace(-1, 1, 19)
    delta = predict_response(fit(5, -1), cos)
    f = fit_response_curve(np.column_stack([cos, delta]))
    assert abs(f.a - 5) <= 0.01 and abs(f.b + 1) <= 0.01
    oa, ob = dense_grid_oracle(cos, delta, (f.a, f.b))
    assert abs(f.a - oa) <= 0.01 and abs(f.b - ob) <= 0.01
    assert f.converged


def test_null_effect():
    f = fit_response_curve([(c, 0.0) for c in (-1, 0, 0.5, 1)])
    assert (f.a, f.b, f.mse, f.b_identified) == (0.0, 0.0, 0.0, False)


def test_degenerate_points():
    with pytest.raises(DegenerateFitError):
        fit_response_curve([(0.1, 0.2), (0.3, 0.4)])
    with pytest.raises(DegenerateFitError):
        fit_response_curve([(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)])
    with pytest.raises(DegenerateFitError):
        fit_response_curve([(0.1, math.nan), (0.2, 0.1), (0.3, 0.2)])


def test_published_phrase_fit():
    rows = reference_values()["phrase_probe"]
    f = fit_response_curve([(r["cos"], r["delta"]) for r in rows])
    assert f.a > 0
    assert predict_response(f, 0.0) == 0.0
    grid = np.linspace(-1, 1, 41)
    assert np.all(np.diff(predict_response(f, grid)) > 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-8, 8), st.floats(-4, 4))
def test_fit_never_worse_than_truth(a, b):
    cos = np.linspace(-1, 1, 19)
    rng = np.random.default_rng(0)
    delta = predict_response(fit(a, b), cos) + rng.normal(0, 0.01, cos.size)
    f = fit_response_curve(np.column_stack([cos, delta]))
    true_mse = float(np.mean((predict_response(fit(a, b), cos) - delta) ** 2))
    assert f.mse <= true_mse + 1e-12
