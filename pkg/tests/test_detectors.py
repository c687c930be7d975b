import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcd_lab.detectors import (SRRS, CuSum, ParallelWLCuSum, WindowGLR, WLCuSum, detector_from_dict,
                               llr_increment, run_until_alarm, trace, write_trace_csv)
from qcd_lab.errors import InvalidParameter
from qcd_lab.estimators import js_global_mean, js_point, js_subspace, ls_projection, ml

from oracles import cusum_path, estimate_brute, glr_path, srrs_path, wl_path

K = 6
_rng = np.random.default_rng(7)
Z6 = _rng.normal(size=(K, 2))
MU6 = _rng.normal(size=K)

SPECS = {
    "ml": (ml(K), dict(kind="ml")),
    "js0": (js_point(K, positive_part=False), dict(kind="js_point", positive_part=False)),
    "js_mu": (js_point(K, MU6), dict(kind="js_point", mu=MU6)),
    "jsgm": (js_global_mean(K), dict(kind="js_global_mean")),
    "jsgm_raw": (js_global_mean(K, False), dict(kind="js_global_mean", positive_part=False)),
    "jsv": (js_subspace(Z6), dict(kind="js_subspace", Z=Z6)),
    "ls": (ls_projection(Z6), dict(kind="ls_projection", Z=Z6)),
}


def _est(kw, literal=False):
    def f(rows):
        w = len(rows) - 1 if literal else len(rows)
        return estimate_brute(K=K, xbar=rows.mean(axis=0), w=w, **kw)
    return f


def _data(seed, n, shift=0.4):
    return np.random.default_rng(seed).normal(size=(n, K)) + shift


def test_llr_examples():
    x = np.array([0.3, -1.2])
    assert llr_increment(np.zeros(2), x) == 0.0
    th = np.array([0.6, 0.8])
    assert llr_increment(th, th) == pytest.approx(0.5 * th @ th)
    assert llr_increment([1.0, 0.0], [0.0, 0.0]) == -0.5
    with pytest.raises(InvalidParameter):
        llr_increment([1.0, 2.0], [1.0])


def test_cusum_clamps_previous_value_only():
    det = CuSum([1.0], threshold=1.0)
    # x - 1/2 = -0.3
    out = det.step([0.2])
    assert out.statistic == pytest.approx(-0.3) and not out.alarmed
    out = det.step([0.6])
    assert out.statistic == pytest.approx(0.1)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.integers(30, 50))
def test_cusum_matches_max_over_start_points(seed, n):
    X = _data(seed, n)
    theta = np.random.default_rng(seed + 1).normal(size=K)
    raw, _ = CuSum(theta).process(X)
    np.testing.assert_allclose(raw, cusum_path(theta, X), rtol=1e-8, atol=1e-10)


def test_wl_never_alarms_during_warmup():
    X = np.full((12, K), 50.0)
    det = WLCuSum(ml(K), 5, threshold=-1e9, warmup="accumulate")
    outs = [det.step(x) for x in X]
    assert not any(o.alarmed for o in outs[:5])
    assert all(o.alarmed for o in outs[5:])


def test_wl_window_one_uses_previous_observation():
    X = _data(3, 20)
    raw, _ = WLCuSum(ml(K), 1).process(X)
    S = 0.0
    for n in range(2, 21):
        S = max(S, 0) + llr_increment(X[n - 2], X[n - 1])
        assert raw[n - 1] == pytest.approx(S, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("warmup", ["hold", "accumulate"])
def test_wl_ml_window_three_matches_recomputation(warmup):
    X = _data(5, 30)
    raw, elig = WLCuSum(ml(K), 3, warmup=warmup).process(X)
    ref = wl_path(X, 3, lambda rows: rows.mean(axis=0), warmup)
    np.testing.assert_allclose(raw, ref, rtol=1e-10, atol=1e-12)
    assert np.all(np.isneginf(elig[:3]))
    np.testing.assert_allclose(elig[3:], ref[3:])


@settings(max_examples=30)
@given(st.sampled_from(sorted(SPECS)), st.integers(1, 9), st.sampled_from(["hold", "accumulate"]),
       st.integers(0, 10**6), st.integers(30, 50))
def test_wl_matches_recomputation(name, w, warmup, seed, n):
    spec, kw = SPECS[name]
    X = _data(seed, n)
    raw, _ = WLCuSum(spec, w, warmup=warmup).process(X)
    ref = wl_path(X, w, _est(kw), warmup)
    np.testing.assert_allclose(raw, ref, rtol=1e-8, atol=1e-9)


def test_hold_warmup_keeps_statistic_at_zero():
    raw, _ = WLCuSum(ml(K), 4).process(_data(1, 10, shift=2.0))
    assert np.all(raw[:4] == 0.0)


@pytest.mark.parametrize("warmup", ["hold", "accumulate"])
def test_parallel_with_one_window_is_single_window(warmup):
    X = _data(9, 40)
    a = ParallelWLCuSum(js_global_mean(K), max_window=1, warmup=warmup).process(X)
    b = WLCuSum(js_global_mean(K), 1, warmup=warmup).process(X)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-13)
    for thr in (0.5, 2.0, 4.0):
        ta = run_until_alarm(ParallelWLCuSum(js_global_mean(K), max_window=1, warmup=warmup), thr, X, 40)
        tb = run_until_alarm(WLCuSum(js_global_mean(K), 1, warmup=warmup), thr, X, 40)
        assert ta == tb


def test_parallel_default_window_range():
    det = ParallelWLCuSum(js_global_mean(K))
    assert det.max_window == 200
    assert list(det.windows) == list(range(1, 201))


@pytest.mark.parametrize("warmup", ["hold", "accumulate"])
def test_parallel_is_max_of_members(warmup):
    X = _data(2, 45)
    wins = [1, 2, 5, 9]
    spec = js_global_mean(K)
    raw, el = ParallelWLCuSum(spec, windows=wins, warmup=warmup).process(X)
    members = [WLCuSum(spec, w, warmup=warmup).process(X) for w in wins]
    np.testing.assert_allclose(raw, np.max([m[0] for m in members], axis=0), rtol=1e-12)
    np.testing.assert_allclose(el, np.max([m[1] for m in members], axis=0), rtol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.floats(0.5, 6.0))
def test_parallel_stops_no_later_than_any_member(seed, b):
    X = _data(seed, 300, shift=0.3)
    spec = js_global_mean(K)
    wins = [1, 3, 8, 20]
    t_par = run_until_alarm(ParallelWLCuSum(spec, windows=wins), b, X, 300).stopping_time
    for w in wins:
        assert t_par <= run_until_alarm(WLCuSum(spec, w), b, X, 300).stopping_time


def test_glr_examples():
    x = np.array([1.0, -2.0, 0.5, 0, 0, 3])
    assert WindowGLR(K, 10).step(x).statistic == pytest.approx(0.5 * x @ x)
    raw, _ = WindowGLR(K, 10).process(np.zeros((15, K)))
    assert np.all(raw == 0)


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_glr_matches_double_loop(seed, wmax):
    X = _data(seed, 40, shift=0.0)
    raw, _ = WindowGLR(K, wmax).process(X)
    np.testing.assert_allclose(raw, glr_path(X, wmax), rtol=1e-8)


def test_srrs_first_step_is_zero():
    det = SRRS(js_global_mean(K), threshold=0.0)
    out = det.step(np.full(K, 9.0))
    assert out.statistic == 0.0
    assert not out.alarmed  # 0 > 0 is false
    det = SRRS(js_global_mean(K), threshold=-0.01)
    assert det.step(np.zeros(K)).alarmed


def test_srrs_ml_matches_brute_force():
    X = _data(11, 25)
    raw, _ = SRRS(ml(K)).process(X)
    np.testing.assert_allclose(raw, srrs_path(X, lambda r: r.mean(axis=0)), rtol=1e-10)


@settings(max_examples=10)
@given(st.sampled_from(sorted(SPECS)), st.booleans(), st.integers(0, 10**6))
def test_srrs_matches_brute_force(name, literal, seed):
    spec, kw = SPECS[name]
    X = _data(seed, 30)
    raw, _ = SRRS(spec, literal=literal).process(X)
    np.testing.assert_allclose(raw, srrs_path(X, _est(kw, literal)), rtol=1e-8, atol=1e-9)


def test_srrs_new_start_contributes_zero_first_increment():
    det = SRRS(js_global_mean(K))
    det.process(_data(4, 10))
    t, L = det.start_statistics()
    assert t[-1] == 10 and L[-1] == 0.0
    assert len(t) == det.live_starts == 10


def test_srrs_survives_large_statistics():
    X = _data(6, 400, shift=2.0)
    raw, _ = SRRS(js_global_mean(K)).process(X)
    assert np.all(np.isfinite(raw))
    assert raw[-1] > 50
    # the aggregate is the log-sum-exp of the per-start statistics
    det = SRRS(js_global_mean(K))
    det.process(X[:40])
    _, L = det.start_statistics()
    assert det.last == pytest.approx(math.log(np.sum(np.exp(L - L.max()))) + L.max(), rel=1e-12)


def test_srrs_start_statistic_is_a_likelihood_ratio():
    # E_inf[exp(L); L < c] must equal the probability of {L < c} when each
    # observation is drawn around the start's own plug-in estimate
    n, k = 12, 6
    rng = np.random.default_rng(21)
    tilted = []
    for _ in range(3000):
        X, L = np.zeros((n, k)), 0.0
        for m in range(n):
            th = estimate_brute("js_global_mean", k, X[:m].mean(axis=0), m) if m else np.zeros(k)
            X[m] = th + rng.standard_normal(k)
            L += th @ X[m] - 0.5 * th @ th
        tilted.append(L)
    tilted = np.array(tilted)
    det = SRRS(js_global_mean(k))
    null = np.empty(30_000)
    for i in range(null.size):
        det.reset()
        det.process(rng.standard_normal((n, k)))
        null[i] = det.start_statistics()[1][0]
    for c in (0.0, 3.0):
        p = np.mean(tilted < c)
        v = np.exp(null) * (null < c)
        se = math.hypot(math.sqrt(p * (1 - p) / tilted.size), v.std() / math.sqrt(v.size))
        assert abs(p - v.mean()) <= 4 * se


def test_srrs_pruning_changes_almost_nothing():
    X = _data(8, 300, shift=0.0)
    full, _ = SRRS(js_global_mean(K)).process(X)
    pruned_det = SRRS(js_global_mean(K), prune_delta=40)
    pruned, _ = pruned_det.process(X)
    np.testing.assert_allclose(pruned, full, rtol=1e-12, atol=1e-12)
    assert SRRS(js_global_mean(K)).pre_change_variant().prune_delta == 40


def test_srrs_buffer_growth_is_transparent():
    X = _data(12, 600, shift=0.0)
    small = SRRS(js_global_mean(K), capacity=8).process(X)[0]
    big = SRRS(js_global_mean(K), capacity=1024).process(X)[0]
    np.testing.assert_array_equal(small, big)


def test_block_and_step_paths_agree():
    X = _data(13, 35)
    for make in (lambda: CuSum(np.ones(K) * 0.3), lambda: WLCuSum(js_global_mean(K), 4),
                 lambda: ParallelWLCuSum(js_global_mean(K), 10), lambda: WindowGLR(K, 7),
                 lambda: SRRS(js_global_mean(K))):
        bulk = make().process(X)[0]
        det = make()
        steps = [det.step(x).statistic for x in X]
        np.testing.assert_allclose(steps, bulk, rtol=1e-12)


def test_step_outcome_alarm_matches_threshold():
    X = _data(14, 40)
    det = WLCuSum(js_global_mean(K), 3, threshold=1.0)
    for n, x in enumerate(X, start=1):
        o = det.step(x)
        assert o.time == n
        assert o.alarmed == (n > 3 and o.statistic > 1.0)


def test_run_until_alarm_low_threshold_stops_after_warmup():
    X = _data(15, 50)
    rec = run_until_alarm(WLCuSum(ml(K), 7), -1e300, X, 50)
    assert rec.stopping_time == 8 and rec.alarmed and not rec.censored


def test_run_until_alarm_censors_at_cap():
    rec = run_until_alarm(WindowGLR(K, 20), 1e9, _data(16, 500), 100, seed=42)
    assert (rec.stopping_time, rec.alarmed, rec.censored, rec.replication_seed) == (100, False, True, 42)
    with pytest.raises(InvalidParameter):
        run_until_alarm(WindowGLR(K, 20), 1.0, _data(16, 5), 0)


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.floats(-2, 8), st.floats(0, 4))
def test_stopping_time_monotone_in_threshold(seed, b, db):
    X = _data(seed, 200, shift=0.25)
    for make in (lambda: CuSum(np.full(K, 0.25)), lambda: WLCuSum(js_global_mean(K), 5),
                 lambda: ParallelWLCuSum(js_global_mean(K), 15), lambda: WindowGLR(K, 15),
                 lambda: SRRS(js_global_mean(K))):
        t1 = run_until_alarm(make(), b, X, 200).stopping_time
        t2 = run_until_alarm(make(), b + db, X, 200).stopping_time
        assert t1 <= t2


def test_round_trip_serialization():
    dets = [CuSum(np.arange(K, dtype=float)), WLCuSum(js_subspace(Z6), 7, 3.0, "accumulate"),
            ParallelWLCuSum(ml(K), 12, windows=[2, 5, 12]), WindowGLR(K, 30, 9.0),
            SRRS(js_point(K, MU6), 2.0, literal=True, prune_delta=30.0)]
    X = _data(17, 30)
    for det in dets:
        back = detector_from_dict(det.to_dict())
        assert type(back) is type(det) and back.threshold == det.threshold
        np.testing.assert_array_equal(back.process(X)[0], det.fresh().process(X)[0])


def test_trace_csv(tmp_path):
    X = _data(18, 12, shift=1.0)
    rows = trace(WLCuSum(ml(K), 2), X, threshold=0.5)
    assert [r[0] for r in rows] == list(range(1, 13))
    assert not rows[0][2] and not rows[1][2]
    path = tmp_path / "t.csv"
    write_trace_csv(rows, path)
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["n", "statistic", "alarmed"]
    assert float(got[5]["statistic"]) == rows[5][1]


@pytest.mark.parametrize("bad", [lambda: WLCuSum(ml(K), 0), lambda: WLCuSum(ml(K), 3, warmup="lazy"),
                                 lambda: SRRS(ml(K), prune_delta=0), lambda: CuSum(np.ones(3)).step(np.ones(4))])
def test_invalid_detector_arguments(bad):
    with pytest.raises(InvalidParameter):
        bad()
