"""Experiment drivers for estimator MSE and detection delay.

Each driver returns a ``Table``.  Detection experiments calibrate every
test's threshold to the requested ARL (or use ``b = log gamma``) and then
estimate ADD with the change at the first sample.  Thresholds depend only on
the test and K, never on the post-change scenario, so a ``ThresholdBook`` is
shared across scenario grids.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .analysis import (BoundInputs, bound_minimizing_window, delay_approximation, delay_upper_bound,
                       kl_divergence)
from .detectors import SRRS, Detector, ParallelWLCuSum, WindowGLR, WLCuSum
from .errors import InvalidParameter
from .estimators import js_global_mean, js_point, js_subspace, ls_projection, ml, mse_compare, mse_monte_carlo
from .harness import ADD_MAX_STEPS, ADD_REPS, ARL_REPS, calibrate, estimate_add
from .model import SpatialModel, scenario_dense, scenario_equal, scenario_sparse, scenario_spatial
from .output import Table

log = logging.getLogger(__name__)

MAX_WINDOW = 200
DETECTION_TESTS = ("glr", "ml-wl", "js-wl", "ml-srrs", "js-srrs")
SPATIAL_TESTS = ("glr", "ml-wl", "js-wl", "jsv-wl", "ls-wl")
ADD_COLUMNS = ("test", "gamma", "b", "arl", "arl_se", "add", "add_se", "censor_rate")


def build_test(name: str, K: int, Z=None, max_window: int = MAX_WINDOW, warmup: str = "hold") -> Detector:
    """Detector for a short test name.

    ``glr`` window-limited GLR; ``{ml,js}-wl`` parallel WL-CuSum; ``{ml,js}-srrs``;
    ``jsv-wl`` / ``ls-wl`` use the column space of ``Z`` (JS toward it, or the
    projection itself).  ``js`` means positive-part JS toward the global mean.
    """
    if name == "glr":
        return WindowGLR(K, max_window)
    est_name, _, family = name.partition("-")
    if est_name in ("jsv", "ls") and Z is None:
        raise InvalidParameter(f"test {name!r} needs a target matrix Z")
    est = {
        "ml": lambda: ml(K),
        "js": lambda: js_global_mean(K),
        "jsv": lambda: js_subspace(Z),
        "ls": lambda: ls_projection(Z),
    }.get(est_name)
    if est is None or family not in ("wl", "srrs"):
        raise InvalidParameter(f"unknown test {name!r}")
    if family == "wl":
        return ParallelWLCuSum(est(), max_window, warmup=warmup)
    return SRRS(est())


def default_bracket(name: str, K: int) -> Tuple[float, float]:
    # GLR thresholds sit far above log(gamma): the statistic is a maximum of
    # chi-square(K)/2 variables, so the search range grows with K.  The
    # ML-based SRRS statistic drifts down hard before the change, so its
    # threshold can sit well below log(gamma) (never below 0, where it alarms
    # at once).
    if name == "glr":
        return (-3.0, 3.0 + K)
    if name.endswith("srrs"):
        return (-6.0, 3.0)
    return (-3.0, 3.0)


@dataclass
class ThresholdBook:
    """Thresholds per (test configuration, gamma), computed on demand and cached.

    ``mode="calibrated"`` matches the Monte Carlo ARL to gamma;
    ``mode="log_gamma"`` uses ``b = log gamma``.
    """

    mode: str = "calibrated"
    arl_reps: int = ARL_REPS
    rel_tol: float = 0.05
    seed: int = 0
    workers: Optional[int] = None
    cache: Dict[Tuple[str, float], dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("calibrated", "log_gamma"):
            raise InvalidParameter(f"threshold mode for experiments must be calibrated or log_gamma, got {self.mode!r}")

    def _key(self, det: Detector, gamma: float):
        d = det.to_dict()
        d.pop("threshold", None)
        return json.dumps(d, sort_keys=True), float(gamma)

    def thresholds(self, det: Detector, gammas: Iterable[float], bracket=(-3.0, 3.0)) -> Dict[float, dict]:
        gammas = [float(g) for g in gammas]
        if self.mode == "log_gamma":
            return {g: {"b": math.log(g), "arl": math.nan, "arl_se": math.nan} for g in gammas}
        todo = [g for g in gammas if self._key(det, g) not in self.cache]
        if todo:
            log.info("calibrating %s for gamma in %s", det.kind, todo)
            res = calibrate(det, todo, reps=self.arl_reps, rel_tol=self.rel_tol, bracket=bracket,
                            seed=self.seed, workers=self.workers)
            for r in res:
                self.cache[self._key(det, r.gamma)] = {"b": r.b, "arl": r.arl, "arl_se": r.se}
        return {g: self.cache[self._key(det, g)] for g in gammas}


def _run_add_grid(table: Table, book: ThresholdBook, tests: Dict[str, Detector], brackets, gammas,
                  scenario, add_reps, max_steps, seed, workers, **keys):
    for name, det in tests.items():
        thr = book.thresholds(det, gammas, brackets[name])
        for g in gammas:
            t = thr[float(g)]
            res = estimate_add(det, scenario, t["b"], reps=add_reps, max_steps=max_steps, seed=seed,
                               workers=workers)
            for w in res.warnings:
                log.warning("%s gamma=%g: %s", name, g, w)
            table.add(**keys, test=name, gamma=float(g), b=t["b"], arl=t["arl"], arl_se=t["arl_se"],
                      add=res.add, add_se=res.se, censor_rate=res.censor_rate)


def experiment_mse_curves(K: int = 10, w: int = 1, theta_norms: Sequence[float] = (0, 0.5, 1, 2, 3, 4, 6, 8, 10),
                          reps: int = 100_000, seed: int = 0) -> Table:
    """MSE of ML, JS and positive-part JS (all toward 0) against |theta|.

    The three estimators share draws; the ``*_minus_*`` standard errors are
    for the paired differences.
    """
    cols = ("theta_norm", "mse_ml", "mse_js", "mse_jsplus", "se_ml", "se_js", "se_jsplus",
            "se_js_minus_ml", "se_jsplus_minus_js")
    table = Table(cols, meta={"K": K, "w": w, "reps": reps})
    specs = [ml(K), js_point(K, positive_part=False), js_point(K)]
    direction = np.full(K, 1.0 / math.sqrt(K))
    for i, r in enumerate(theta_norms):
        mean, se, dse = mse_compare(specs, r * direction, w, reps, seed=(seed, i))
        table.add(theta_norm=float(r), mse_ml=mean[0], mse_js=mean[1], mse_jsplus=mean[2], se_ml=se[0],
                  se_js=se[1], se_jsplus=se[2], se_js_minus_ml=dse[1, 0], se_jsplus_minus_js=dse[2, 1])
    return table


def js_mse_table(K: int, theta, w_max: int = MAX_WINDOW, reps: int = 20_000, seed: int = 0) -> Dict[int, float]:
    """Monte Carlo MSE of positive-part global-mean JS for each window 1..w_max."""
    spec = js_global_mean(K)
    return {w: mse_monte_carlo(spec, theta, w, reps, seed=(seed, w))[0] for w in range(1, w_max + 1)}


def experiment_bound_eval(Ks: Sequence[int] = (10, 50), bs: Sequence[float] = (2, 4, 6, 8, 10),
                          reps: int = ADD_REPS, seed: int = 0, window_rule: str = "bound", window_b: float = 10.0,
                          w_max: int = MAX_WINDOW, mse_reps: int = 20_000, max_steps: int = ADD_MAX_STEPS,
                          workers: Optional[int] = None) -> Table:
    """Single-window WL-CuSum delay against the analytic bound and approximation.

    theta has all components ``K**-0.5``.  The window for each estimator
    minimizes the bound (``window_rule="bound"``) or the approximation
    (``"approx"``) at ``b = window_b``.
    """
    cols = ("K", "estimator", "b", "w", "I", "mse", "bound", "approx", "add", "add_se", "censor_rate")
    table = Table(cols, meta={"reps": reps, "window_rule": window_rule, "window_b": window_b})
    for K in Ks:
        sc = scenario_equal(K)
        I = kl_divergence(sc.theta)
        js_tab = js_mse_table(K, sc.theta, w_max, mse_reps, seed)
        for name, spec, model in (("ml", ml(K), "ml"), ("js", js_global_mean(K), js_tab)):
            w = bound_minimizing_window(window_b, I, K, model, w_max, objective=window_rule)
            mse = K / w if model == "ml" else js_tab[w]
            det = WLCuSum(spec, w)
            for b in bs:
                inp = BoundInputs(float(b), w, I, mse)
                res = estimate_add(det, sc, float(b), reps=reps, max_steps=max_steps, seed=seed, workers=workers)
                table.add(K=K, estimator=name, b=float(b), w=w, I=I, mse=mse, bound=delay_upper_bound(inp),
                          approx=delay_approximation(inp), add=res.add, add_se=res.se, censor_rate=res.censor_rate)
    return table


def _detection_setup(tests, K, Z=None, max_window=MAX_WINDOW, warmup="hold"):
    dets = {t: build_test(t, K, Z, max_window, warmup) for t in tests}
    return dets, {t: default_bracket(t, K) for t in tests}


def experiment_arl_add(Ks: Sequence[int] = (5, 30), gammas: Sequence[float] = (250, 500, 1000, 2000),
                       tests: Sequence[str] = DETECTION_TESTS, add_reps: int = ADD_REPS,
                       book: Optional[ThresholdBook] = None, seed: int = 0, max_steps: int = ADD_MAX_STEPS,
                       workers: Optional[int] = None, max_window: int = MAX_WINDOW) -> Table:
    """ARL/ADD trade-off for the dense scenario."""
    book = book or ThresholdBook(seed=seed, workers=workers)
    table = Table(("K",) + ADD_COLUMNS)
    for K in Ks:
        dets, brackets = _detection_setup(tests, K, max_window=max_window)
        _run_add_grid(table, book, dets, brackets, gammas, scenario_dense(K), add_reps, max_steps, seed, workers, K=K)
    return table


def experiment_k_sweep(Ks: Sequence[int] = (5, 10, 20, 30, 40, 50), gamma: float = 2000,
                       tests: Sequence[str] = DETECTION_TESTS, add_reps: int = ADD_REPS,
                       book: Optional[ThresholdBook] = None, seed: int = 0, max_steps: int = ADD_MAX_STEPS,
                       workers: Optional[int] = None, max_window: int = MAX_WINDOW) -> Table:
    """ADD against the number of streams for the dense scenario at a fixed ARL."""
    return experiment_arl_add(Ks, (gamma,), tests, add_reps, book, seed, max_steps, workers, max_window)


def experiment_sparse_sweep(K: int = 20, ks: Sequence[int] = tuple(range(1, 21)), gamma: float = 2000,
                            tests: Sequence[str] = DETECTION_TESTS, add_reps: int = ADD_REPS,
                            book: Optional[ThresholdBook] = None, seed: int = 0, max_steps: int = ADD_MAX_STEPS,
                            workers: Optional[int] = None, max_window: int = MAX_WINDOW) -> Table:
    """ADD against the number of affected streams (unit-norm sparse change)."""
    book = book or ThresholdBook(seed=seed, workers=workers)
    table = Table(("K", "k") + ADD_COLUMNS)
    dets, brackets = _detection_setup(tests, K, max_window=max_window)
    for k in ks:
        _run_add_grid(table, book, dets, brackets, (gamma,), scenario_sparse(K, k), add_reps, max_steps, seed,
                      workers, K=K, k=k)
    return table


def experiment_spatial(rs: Sequence[float] = (0, 2, 4, 6, 8, 10, 12, 14), gamma: float = 1000,
                       gammas_at_zero: Sequence[float] = (250, 500, 1000, 2000), K: int = 20,
                       sources: Sequence[float] = (20.0, 80.0), tests: Sequence[str] = SPATIAL_TESTS,
                       add_reps: int = ADD_REPS, book: Optional[ThresholdBook] = None, seed: int = 0,
                       max_steps: int = ADD_MAX_STEPS, workers: Optional[int] = None,
                       max_window: int = MAX_WINDOW) -> Table:
    """Sensors on a line observing two point sources.

    Subspace-based tests shrink toward the column space of the nominal
    design matrix while the true sources are displaced by ``r``.  Emits ADD
    against ``r`` at ``gamma`` and ADD against ARL at ``r = 0``.
    """
    book = book or ThresholdBook(seed=seed, workers=workers)
    table = Table(("sweep", "r") + ADD_COLUMNS)
    _, Z0 = scenario_spatial(SpatialModel(K, sources, 0.0))
    dets, brackets = _detection_setup(tests, K, Z0, max_window)
    for r in rs:
        sc, _ = scenario_spatial(SpatialModel(K, sources, float(r)))
        _run_add_grid(table, book, dets, brackets, (gamma,), sc, add_reps, max_steps, seed, workers,
                      sweep="displacement", r=float(r))
    if gammas_at_zero:
        sc, _ = scenario_spatial(SpatialModel(K, sources, 0.0))
        _run_add_grid(table, book, dets, brackets, gammas_at_zero, sc, add_reps, max_steps, seed, workers,
                      sweep="arl", r=0.0)
    return table


EXPERIMENTS = {
    "mse_curves": experiment_mse_curves,
    "bound_eval": experiment_bound_eval,
    "arl_add": experiment_arl_add,
    "k_sweep": experiment_k_sweep,
    "sparse_sweep": experiment_sparse_sweep,
    "spatial": experiment_spatial,
}
