"""Online stopping rules for a Gaussian mean shift.

All detectors share one interface:

``step(x)``
    Consume one observation and return a ``StepOutcome``.
``advance(X, level)``
    Consume rows of ``X`` until the alarm-eligible statistic first exceeds
    ``level``.  This is the fast path used by the Monte Carlo harness.
``reset()``
    Return to the initial state (time 0).

Time is 1-based: the first observation is ``n = 1``.  SRRS statistics are
kept in the log domain; everything else is on the natural scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import _kernels as kern
from .errors import InvalidParameter
from .estimators import EstimatorSpec

PRUNE_DELTA = 40.0


@dataclass(frozen=True)
class StepOutcome:
    """Statistic after one step; ``alarmed`` means it crossed the threshold
    at an alarm-eligible time."""

    statistic: float
    alarmed: bool
    time: int


@dataclass(frozen=True)
class RunRecord:
    stopping_time: int
    alarmed: bool
    censored: bool
    replication_seed: object = None


def llr_increment(theta_hat, x) -> float:
    """Log-likelihood ratio ``theta_hat . x - |theta_hat|^2 / 2`` of one sample."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if theta_hat.shape != x.shape:
        raise InvalidParameter(f"length mismatch: theta_hat {theta_hat.shape} vs x {x.shape}")
    return float(theta_hat @ x - 0.5 * (theta_hat @ theta_hat))


def _estimator_args(spec: EstimatorSpec):
    code = {"ml": kern.ML, "ls_projection": kern.TARGET}.get(spec.kind, kern.JS)
    Q = np.ascontiguousarray(spec.basis, dtype=np.float64)
    mu = np.ascontiguousarray(spec.mu, dtype=np.float64)
    return Q, mu, float(mu @ mu), code, bool(spec.positive_part), float(spec.shrink_constant)


def _as_block(X, K: int) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != K:
        raise InvalidParameter(f"observations must have {K} components, got shape {X.shape}")
    return X


WARMUP_MODES = ("hold", "accumulate")


def _check_warmup(mode: str) -> str:
    if mode not in WARMUP_MODES:
        raise InvalidParameter(f"warmup must be one of {WARMUP_MODES}, got {mode!r}")
    return mode


class Detector:
    """Base class; subclasses implement ``_reset`` and ``_advance``."""

    kind = ""

    def __init__(self, K: int, threshold: float = math.inf):
        if int(K) != K or K < 1:
            raise InvalidParameter(f"K must be a positive integer, got {K!r}")
        self.K = int(K)
        self.threshold = float(threshold)
        self.reset()

    # number of initial steps at which no alarm may be raised
    warmup = 0

    def reset(self) -> None:
        self._reset()
        self.last = 0.0

    @property
    def n(self) -> int:
        raise NotImplementedError

    def advance(self, X, level: float):
        """Consume rows until the eligible statistic exceeds ``level``.

        Returns ``(consumed, eligible, raw)`` where ``eligible`` holds the
        per-row alarm-eligible statistic (``-inf`` during warm-up) and ``raw``
        the statistic itself, both truncated to the consumed rows.
        """
        X = _as_block(X, self.K)
        m = X.shape[0]
        out = np.empty(m)
        raw = np.empty(m)
        used = self._advance(X, float(level), out, raw)
        if used:
            self.last = float(raw[used - 1])
        return used, out[:used], raw[:used]

    def step(self, x) -> StepOutcome:
        _, out, raw = self.advance(x, math.inf)
        return StepOutcome(float(raw[0]), bool(out[0] > self.threshold), self.n)

    def process(self, X):
        """Run through every row of ``X`` without stopping; returns ``(raw, eligible)``."""
        _, out, raw = self.advance(X, math.inf)
        return raw, out

    def fresh(self) -> "Detector":
        """New detector with the same configuration and a clean state."""
        return type(self).from_dict(self.to_dict())

    def pre_change_variant(self) -> "Detector":
        """Configuration to use for long pre-change (ARL) runs."""
        return self.fresh()

    def to_dict(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_dict(cls, d: dict) -> "Detector":
        return detector_from_dict(d)

    def _reset(self):
        raise NotImplementedError

    def _advance(self, X, level, out, raw) -> int:
        raise NotImplementedError


class CuSum(Detector):
    """CuSum with known post-change mean: ``W_n = max(W_{n-1}, 0) + llr``."""

    kind = "cusum"

    def __init__(self, theta, threshold: float = math.inf):
        self.theta = np.ascontiguousarray(theta, dtype=np.float64).reshape(-1)
        self._half_sq = 0.5 * float(self.theta @ self.theta)
        super().__init__(self.theta.size, threshold)

    def _reset(self):
        self._fst = np.zeros(1)
        self._n = 0

    @property
    def n(self):
        return self._n

    def _advance(self, X, level, out, raw):
        used = kern.cusum_advance(self.theta, self._half_sq, X, self._fst, level, out)
        raw[:used] = out[:used]
        self._n += used
        return used

    def to_dict(self):
        return {"kind": self.kind, "theta": self.theta.tolist(), "threshold": self.threshold}


class WLCuSum(Detector):
    """Window-limited CuSum with a plug-in estimate of the post-change mean.

    The estimate at time n is built from the ``window`` observations strictly
    before ``x_n``.  Alarms are suppressed while n <= window.  During that
    warm-up the statistic either stays at zero (``warmup="hold"``) or already
    accumulates with an estimate from all n - 1 earlier observations
    (``warmup="accumulate"``).
    """

    kind = "wl_cusum"

    def __init__(self, estimator: EstimatorSpec, window: int, threshold: float = math.inf,
                 warmup: str = "hold"):
        if int(window) != window or window < 1:
            raise InvalidParameter(f"window must be an integer >= 1, got {window!r}")
        self.estimator = estimator
        self.window = int(window)
        self.warmup_mode = _check_warmup(warmup)
        self._args = _estimator_args(estimator)
        super().__init__(estimator.K, threshold)

    @property
    def warmup(self):
        return self.window

    def _reset(self):
        d = self.estimator.d
        w, K = self.window, self.estimator.K
        self._buf = np.zeros((w, K))
        self._qbuf = np.zeros((w, d))
        self._mbuf = np.zeros(w)
        self._S = np.zeros(K)
        self._qS = np.zeros(d)
        self._fst = np.zeros(2)
        self._ist = np.zeros(2, dtype=np.int64)

    @property
    def n(self):
        return int(self._ist[0])

    def _advance(self, X, level, out, raw):
        Q, mu, musq, code, pp, shrink = self._args
        return kern.wl_advance(self._buf, self._qbuf, self._mbuf, self._S, self._qS, self._fst, self._ist,
                               Q, mu, musq, code, pp, shrink, self.warmup_mode == "hold", X, level, out, raw)

    def to_dict(self):
        return {"kind": self.kind, "estimator": self.estimator.to_dict(), "window": self.window,
                "threshold": self.threshold, "warmup": self.warmup_mode}


class ParallelWLCuSum(Detector):
    """Bank of WL-CuSum tests with windows ``1..max_window`` and one threshold.

    Stops when the first member alarms; each member only becomes eligible
    once its own warm-up is over.  The reported statistic is the largest
    member statistic.
    """

    kind = "parallel_wl_cusum"

    def __init__(self, estimator: EstimatorSpec, max_window: int = 200, threshold: float = math.inf,
                 windows: Optional[Iterable[int]] = None, warmup: str = "hold"):
        wins = np.arange(1, int(max_window) + 1) if windows is None else np.asarray(sorted(set(windows)))
        if wins.size == 0 or wins[0] < 1 or np.any(wins != np.round(wins)):
            raise InvalidParameter("windows must be positive integers")
        self.windows = wins.astype(np.int64)
        self.max_window = int(self.windows[-1])
        self.estimator = estimator
        self.warmup_mode = _check_warmup(warmup)
        self._args = _estimator_args(estimator)
        super().__init__(estimator.K, threshold)

    @property
    def warmup(self):
        return int(self.windows[0])

    def _reset(self):
        d = self.estimator.d
        W, K = self.max_window, self.estimator.K
        self._buf = np.zeros((W, K))
        self._qbuf = np.zeros((W, d))
        self._mbuf = np.zeros(W)
        self.member_stats = np.zeros(self.windows.size)
        self._ist = np.zeros(2, dtype=np.int64)

    @property
    def n(self):
        return int(self._ist[0])

    def _advance(self, X, level, out, raw):
        Q, mu, musq, code, pp, shrink = self._args
        return kern.parallel_wl_advance(self._buf, self._qbuf, self._mbuf, self.member_stats, self._ist,
                                        self.windows, Q, mu, musq, code, pp, shrink,
                                        self.warmup_mode == "hold", X, level, out, raw)

    def to_dict(self):
        d = {"kind": self.kind, "estimator": self.estimator.to_dict(), "max_window": self.max_window,
             "threshold": self.threshold, "warmup": self.warmup_mode}
        if not np.array_equal(self.windows, np.arange(1, self.max_window + 1)):
            d["windows"] = self.windows.tolist()
        return d


class WindowGLR(Detector):
    """Window-limited GLR: ``max_j |S_j|^2 / (2 j)`` over the last ``j`` samples,
    ``j = 1..max_window``, including the current one."""

    kind = "glr"

    def __init__(self, K: int, max_window: int = 200, threshold: float = math.inf):
        if int(max_window) != max_window or max_window < 1:
            raise InvalidParameter(f"max_window must be an integer >= 1, got {max_window!r}")
        self.max_window = int(max_window)
        super().__init__(K, threshold)

    def _reset(self):
        self._buf = np.zeros((self.max_window, self.K))
        self._ist = np.zeros(2, dtype=np.int64)

    @property
    def n(self):
        return int(self._ist[0])

    def _advance(self, X, level, out, raw):
        used = kern.glr_advance(self._buf, self._ist, X, level, out)
        raw[:used] = out[:used]
        return used

    def to_dict(self):
        return {"kind": self.kind, "K": self.K, "max_window": self.max_window, "threshold": self.threshold}


class SRRS(Detector):
    """Shiryaev-Roberts-Robbins-Siegmund test with a plug-in estimator.

    Start ``t`` estimates the mean from ``X_t .. X_{n-1}`` (zero when n = t)
    and the statistic is ``log sum_t exp(L_{t,n})``.  The shrinkage factor uses
    the number of averaged samples ``n - t``; ``literal=True`` uses ``n - t - 1``
    instead.

    ``prune_delta`` drops starts whose log statistic falls more than that
    below the current best; ``None`` keeps every start.
    """

    kind = "srrs"

    def __init__(self, estimator: EstimatorSpec, threshold: float = math.inf, literal: bool = False,
                 prune_delta: Optional[float] = None, capacity: int = 256):
        self.estimator = estimator
        self.literal = bool(literal)
        if prune_delta is not None and not prune_delta > 0:
            raise InvalidParameter("prune_delta must be positive or None")
        self.prune_delta = prune_delta
        self._capacity0 = int(capacity)
        self._args = _estimator_args(estimator)
        super().__init__(estimator.K, threshold)

    def _reset(self):
        self._alloc(self._capacity0)
        self._C = np.zeros(self.K)
        self._gq = np.zeros(self.estimator.d)
        self._fst = np.zeros(1)
        self._ist = np.zeros(3, dtype=np.int64)

    def _alloc(self, cap):
        K, d = self.K, self.estimator.d
        self._H = np.zeros((cap, K))
        self._HQ = np.zeros((cap, d))
        self._HM = np.zeros(cap)
        self._SQ = np.zeros(cap)
        self._L = np.zeros(cap)
        self._T = np.zeros(cap, dtype=np.int64)
        self._alive = np.zeros(cap, dtype=np.bool_)

    def _grow(self, need):
        old = (self._H, self._HQ, self._HM, self._SQ, self._L, self._T, self._alive)
        rows = int(self._ist[1])
        self._alloc(max(need, 2 * old[0].shape[0]))
        for dst, src in zip((self._H, self._HQ, self._HM, self._SQ, self._L, self._T, self._alive), old):
            dst[:rows] = src[:rows]

    @property
    def n(self):
        return int(self._ist[0])

    @property
    def live_starts(self) -> int:
        return int(self._alive[: self._ist[1]].sum())

    def start_statistics(self):
        """``(start times, log statistics)`` of the live starts, oldest first."""
        rows = int(self._ist[1])
        keep = self._alive[:rows]
        return self._T[:rows][keep].copy(), self._L[:rows][keep].copy()

    def _advance(self, X, level, out, raw):
        need = int(self._ist[1]) + X.shape[0]
        if need > self._H.shape[0]:
            self._grow(need)
        Q, mu, musq, code, pp, shrink = self._args
        delta = -1.0 if self.prune_delta is None else float(self.prune_delta)
        used = kern.srrs_advance(self._H, self._HQ, self._HM, self._SQ, self._L, self._T, self._alive,
                                 self._C, self._gq, self._fst, self._ist, Q, mu, musq, code, pp, shrink,
                                 self.literal, delta, X, level, out)
        raw[:used] = out[:used]
        return used

    def pre_change_variant(self):
        det = self.fresh()
        if det.prune_delta is None:
            det.prune_delta = PRUNE_DELTA
        return det

    def to_dict(self):
        d = {"kind": self.kind, "estimator": self.estimator.to_dict(), "threshold": self.threshold,
             "literal": self.literal}
        if self.prune_delta is not None:
            d["prune_delta"] = self.prune_delta
        return d


def detector_from_dict(d: dict) -> Detector:
    kind = d["kind"]
    thr = float(d.get("threshold", math.inf))
    if kind == "cusum":
        return CuSum(d["theta"], thr)
    if kind == "glr":
        return WindowGLR(int(d["K"]), int(d.get("max_window", 200)), thr)
    est = EstimatorSpec.from_dict(d["estimator"])
    if kind == "wl_cusum":
        return WLCuSum(est, int(d["window"]), thr, d.get("warmup", "hold"))
    if kind == "parallel_wl_cusum":
        return ParallelWLCuSum(est, int(d.get("max_window", 200)), thr, d.get("windows"), d.get("warmup", "hold"))
    if kind == "srrs":
        return SRRS(est, thr, bool(d.get("literal", False)), d.get("prune_delta"))
    raise InvalidParameter(f"unknown detector kind {kind!r}")


def _block_sizes(start=32, cap=4096):
    m = start
    while True:
        yield m
        m = min(2 * m, cap)


def run_until_alarm(detector: Detector, threshold: float, source, max_steps: int, seed=None) -> RunRecord:
    """Feed observations from ``source`` until an alarm or ``max_steps``.

    ``source`` is anything with ``next_block(m)`` (e.g. ``ObservationStream``)
    or a 2-D array of observations.  The detector is reset first.
    """
    if max_steps < 1:
        raise InvalidParameter("max_steps must be >= 1")
    if not hasattr(source, "next_block"):
        source = _ArraySource(source)
    detector.reset()
    sizes = _block_sizes()
    n = 0
    while n < max_steps:
        X = source.next_block(min(next(sizes), max_steps - n))
        if X.shape[0] == 0:
            break
        used, out, _ = detector.advance(X, threshold)
        n += used
        if used and out[used - 1] > threshold:
            return RunRecord(n, True, False, seed)
    return RunRecord(n, False, True, seed)


class _ArraySource:
    def __init__(self, X):
        self.X = np.asarray(X, dtype=float)
        self.pos = 0

    def next_block(self, m):
        blk = self.X[self.pos:self.pos + m]
        self.pos += blk.shape[0]
        return blk


def trace(detector: Detector, X, threshold: Optional[float] = None):
    """Per-step ``(n, statistic, alarmed)`` rows over all of ``X`` (no stopping)."""
    thr = detector.threshold if threshold is None else threshold
    detector.reset()
    raw, elig = detector.process(X)
    return [(i + 1, float(s), bool(e > thr)) for i, (s, e) in enumerate(zip(raw, elig))]


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "statistic", "alarmed"])
        for n, s, a in rows:
            wr.writerow([n, repr(s), int(a)])
