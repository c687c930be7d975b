import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from qcd_lab.analysis import (BoundInputs, bound_minimizing_window, bound_table, delay_approximation,
                              delay_upper_bound, drift, kl_divergence, min_window_for_positive_drift)
from qcd_lab.errors import BoundInapplicable, InvalidParameter


def test_kl_examples():
    assert kl_divergence(np.zeros(4)) == 0
    assert kl_divergence(np.full(4, 0.5)) == pytest.approx(0.5)
    assert kl_divergence([3.0, 4.0]) == 12.5


@given(arrays(float, 5, elements=st.floats(-10, 10)), st.integers(0, 1000))
def test_kl_is_rotation_invariant(theta, seed):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(5, 5)))
    assert kl_divergence(Q @ theta) == pytest.approx(kl_divergence(theta), rel=1e-9, abs=1e-12)


def test_drift_examples():
    assert drift(0.5, 10 / 20) == 0.25
    assert drift(0.5, 2 / 4) == 0.25
    assert drift(0.7, 0.0) == 0.7
    assert drift(0.5, 3.0) < 0  # allowed; callers check the sign
    with pytest.raises(InvalidParameter):
        drift(0.0, 0.1)


def test_bound_examples():
    assert delay_upper_bound(BoundInputs(10, 20, 0.5, 0.5)) == pytest.approx(90.0)
    # known-parameter limit
    assert delay_upper_bound(BoundInputs(7, 0, 0.5, 0.0)) == pytest.approx((7 + 0.5 + 2) / 0.5)
    # the looser form divides by I - mse
    assert delay_upper_bound(BoundInputs(10, 20, 0.5, 0.25), variant="full") == pytest.approx(90.0)


def test_approximation_examples():
    assert delay_approximation(BoundInputs(10, 20, 0.5, 0.25)) == pytest.approx(20 + 10 / 0.375)
    assert delay_approximation(BoundInputs(8, 0, 0.5, 0.0)) == pytest.approx(16.0)


def test_non_positive_drift_is_inapplicable():
    inp = BoundInputs(5, 2, 0.5, 1.0)
    with pytest.raises(BoundInapplicable):
        delay_upper_bound(inp)
    with pytest.raises(BoundInapplicable):
        delay_approximation(inp)
    # the full-mse form needs I > mse, so it fails earlier
    with pytest.raises(BoundInapplicable):
        delay_upper_bound(BoundInputs(5, 2, 0.5, 0.6), variant="full")


@pytest.mark.parametrize("kw", [dict(b=0, w=1, I=1, mse=0), dict(b=1, w=-1, I=1, mse=0),
                                dict(b=1, w=1.5, I=1, mse=0), dict(b=1, w=1, I=0, mse=0),
                                dict(b=1, w=1, I=1, mse=-0.1)])
def test_bound_inputs_validation(kw):
    with pytest.raises(InvalidParameter):
        BoundInputs(**kw)


pos = st.floats(0.01, 50)


@given(pos, st.integers(0, 300), pos, st.floats(0, 20))
def test_bound_dominates_approximation(b, w, I, mse):
    assume(I - mse / 2 > 1e-6)
    inp = BoundInputs(b, w, I, mse)
    assert delay_upper_bound(inp) >= delay_approximation(inp) - 1e-9 * delay_upper_bound(inp)


@given(pos, st.integers(0, 100), pos, st.floats(0, 10), st.floats(1.01, 3))
def test_monotone_in_information_and_mse(b, w, I, mse, f):
    assume(I - mse / 2 > 1e-6)
    base = BoundInputs(b, w, I, mse)
    for fn in (delay_upper_bound, delay_approximation):
        assert fn(BoundInputs(b, w, I * f, mse)) < fn(base)
        assert fn(BoundInputs(b, w, I, mse + 0.1 * (I - mse / 2))) > fn(base)


def test_min_window_examples():
    assert min_window_for_positive_drift(1.0, 10) == 10
    assert min_window_for_positive_drift(0.5, 20) == 40
    assert min_window_for_positive_drift(4.0, 3) == 1
    with pytest.raises(InvalidParameter):
        min_window_for_positive_drift(0.0, 3)


@pytest.mark.parametrize("b", [2.0, 6.0, 10.0])
@pytest.mark.parametrize("K", [10, 50])
def test_window_scan_matches_exhaustive_minimizer(b, K):
    I = 0.5
    # exhaustive oracle written out directly from the formula
    vals = {w: (b + (w + 1) * I + 2) / (I - K / (2 * w)) for w in range(1, 201) if I - K / (2 * w) > 0}
    best = min(vals.values())
    expected = min(w for w, v in vals.items() if v == best)
    assert bound_minimizing_window(b, I, K, "ml") == expected


def test_window_scan_frozen_values():
    # frozen outputs of the exhaustive oracle above
    assert bound_minimizing_window(10, 0.5, 10, "ml") == 29
    assert bound_minimizing_window(10, 0.5, 50, "ml") == 111


def test_window_scan_with_zero_mse_picks_smallest():
    assert bound_minimizing_window(10, 0.5, 10, lambda w: 0.0) == 1


def test_window_scan_inapplicable():
    with pytest.raises(BoundInapplicable):
        bound_minimizing_window(10, 0.01, 50, "ml", w_max=200)


def test_window_scan_table_and_ties():
    table = {w: 0.2 for w in range(1, 11)}
    assert bound_minimizing_window(5, 0.5, 10, table, w_max=10) == 1
    # the approximation objective only ever picks windows with positive drift
    assert bound_minimizing_window(5, 0.5, 10, "ml", objective="approx") >= min_window_for_positive_drift(1.0, 10)


def test_bound_table_rows():
    rows = bound_table([2, 4], 29, 0.5, 10 / 29)
    assert [r[0] for r in rows] == [2, 4]
    assert rows[0][4] == pytest.approx(delay_upper_bound(BoundInputs(2, 29, 0.5, 10 / 29)))
    assert rows[1][5] == pytest.approx(29 + 4 / (0.5 - 5 / 29))


def test_js_bound_below_ml_bound():
    # smaller mse gives a smaller bound at the same window
    for b in (2, 6, 10):
        assert delay_upper_bound(BoundInputs(b, 11, 0.5, 0.25)) < delay_upper_bound(BoundInputs(b, 11, 0.5, 10 / 11))
    assert math.isfinite(delay_upper_bound(BoundInputs(2, 11, 0.5, 0.25)))
