"""Monte Carlo estimation of ARL and ADD, and threshold calibration.

Replication ``i`` of purpose ``tag`` draws its observations from
``replication_rng(seed, i, tag)``, so every estimate is a deterministic
function of the master seed and results never depend on how replications
are split across workers.  Different detectors evaluated with the same seed
see the same noise (common random numbers).

Calibration does not re-simulate for every candidate threshold.  The path
of a detector statistic does not depend on ``b``, so each replication is run
once up to a level ``L`` while recording the times at which the eligible
statistic sets a new running maximum.  The stopping time for any ``b < L``
is the first record time whose value exceeds ``b``, which turns the
bisection over ``b`` into a lookup on cached records.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detectors import Detector, RunRecord, _block_sizes, detector_from_dict, run_until_alarm
from .errors import CalibrationFailed, InvalidParameter
from .model import ObservationStream, Scenario, replication_rng

log = logging.getLogger(__name__)

TAGS = {"arl": 1, "add": 2, "calibrate": 3}
ARL_REPS = 1000
ADD_REPS = 2000
ADD_MAX_STEPS = 100_000
CAP_FACTOR = 20
CENSOR_WARN = 0.001
_STEP_LIMIT = 10**9


def default_workers() -> int:
    """Worker count from ``QCD_LAB_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("QCD_LAB_WORKERS", "1")))
    except ValueError:
        return 1


def arl_cap(gamma: float) -> int:
    return int(min(math.ceil(CAP_FACTOR * gamma), _STEP_LIMIT))


def _null_scenario(K: int) -> Scenario:
    return Scenario(np.ones(K), nu=None, label="pre-change")


def _chunks(indices: Sequence[int], parts: int):
    parts = max(1, min(parts, len(indices)))
    return [list(c) for c in np.array_split(np.asarray(indices, dtype=np.int64), parts) if len(c)]


def _map_replications(fn, indices: Sequence[int], workers: Optional[int]):
    """Apply ``fn(chunk)`` over replication indices; results in index order."""
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(indices) < 2:
        return fn(list(indices))
    chunks = _chunks(indices, 4 * workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return [r for part in parts for r in part]


def _run_chunk(det_dict, scenario, level, max_steps, seed, tag, indices):
    det = detector_from_dict(det_dict)
    out = []
    for i in indices:
        stream = ObservationStream(scenario, replication_rng(seed, i, tag))
        out.append(run_until_alarm(det, level, stream, max_steps, seed=(seed, tag, int(i))))
    return out


@dataclass(frozen=True)
class Ladder:
    """Running-maximum record of one replication up to ``level``.

    ``values`` strictly increase; ``times[j]`` is when ``values[j]`` was set.
    ``censored`` means ``max_steps`` was reached before exceeding ``level``.
    """

    times: np.ndarray
    values: np.ndarray
    end: int
    censored: bool
    level: float

    def stopping_time(self, b: float) -> Tuple[int, bool]:
        """``(T_b, censored)`` for a threshold below ``level``."""
        k = int(np.searchsorted(self.values, b, side="right"))
        if k < self.values.size:
            return int(self.times[k]), False
        if not self.censored:
            raise InvalidParameter(f"threshold {b} is beyond the simulated level {self.level}")
        return self.end, True


def record_ladder(det: Detector, stream, level: float, max_steps: int) -> Ladder:
    det.reset()
    times, values = [], []
    best = -math.inf
    n = 0
    sizes = _block_sizes()
    while n < max_steps:
        X = stream.next_block(min(next(sizes), max_steps - n))
        pos = 0
        while pos < X.shape[0]:
            used, out, _ = det.advance(X[pos:], best)
            pos += used
            n += used
            if used and out[used - 1] > best:
                best = float(out[used - 1])
                times.append(n)
                values.append(best)
                if best > level:
                    return Ladder(np.asarray(times), np.asarray(values), n, False, level)
    return Ladder(np.asarray(times, dtype=np.int64), np.asarray(values), n, True, level)


def _ladder_chunk(det_dict, level, max_steps, seed, tag, indices):
    det = detector_from_dict(det_dict)
    scen = _null_scenario(det.K)
    return [record_ladder(det, ObservationStream(scen, replication_rng(seed, i, tag)), level, max_steps)
            for i in indices]


def _summarize(times: np.ndarray, censored: np.ndarray):
    n = times.size
    mean = float(times.mean())
    se = float(times.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return mean, se, float(censored.mean())


def _censor_warnings(rate: float, what: str) -> Tuple[str, ...]:
    if rate > CENSOR_WARN:
        return (f"{rate:.2%} of {what} runs hit the step cap; the estimate is biased low",)
    return ()


@dataclass(frozen=True)
class ArlResult:
    arl: float
    se: float
    censor_rate: float
    reps: int
    max_steps: int
    b: float
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True)
class AddResult:
    add: float
    se: float
    censor_rate: float
    reps: int
    b: float
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CalibrationResult:
    gamma: float
    b: float
    arl: float
    se: float
    censor_rate: float
    reps: int
    level: float
    bracket: Tuple[float, float]


def estimate_arl(detector: Detector, b: float, *, reps: int = ARL_REPS, max_steps: Optional[int] = None,
                 gamma: Optional[float] = None, seed: int = 0, workers: Optional[int] = None,
                 tag: int = TAGS["arl"]) -> ArlResult:
    """Mean stopping time with no change.

    Runs stopped by the cap count as ``max_steps``.  The cap defaults to
    ``20 * gamma`` (``gamma`` defaults to ``exp(b)``).
    """
    if reps < 1:
        raise InvalidParameter("reps must be >= 1")
    if max_steps is None:
        g = gamma if gamma is not None else math.exp(min(b, 40.0))
        max_steps = arl_cap(g)
    det = detector.pre_change_variant()
    fn = partial(_run_chunk, det.to_dict(), _null_scenario(det.K), float(b), int(max_steps), seed, tag)
    recs: List[RunRecord] = _map_replications(fn, range(reps), workers)
    times = np.array([r.stopping_time for r in recs], dtype=float)
    cens = np.array([r.censored for r in recs])
    arl, se, rate = _summarize(times, cens)
    warn = _censor_warnings(rate, "ARL")
    if rate == 1.0:
        warn += ("every run was censored; the ARL is only a lower bound",)
    return ArlResult(arl, se, rate, reps, int(max_steps), float(b), warn)


def estimate_add(detector: Detector, scenario: Scenario, b: float, *, reps: int = ADD_REPS,
                 max_steps: int = ADD_MAX_STEPS, seed: int = 0, workers: Optional[int] = None,
                 tag: int = TAGS["add"]) -> AddResult:
    """Mean stopping time when the change is present from the first sample."""
    if scenario.nu != 1:
        raise InvalidParameter("ADD is estimated with the change at nu = 1")
    if scenario.K != detector.K:
        raise InvalidParameter(f"scenario has K={scenario.K}, detector expects K={detector.K}")
    if reps < 1:
        raise InvalidParameter("reps must be >= 1")
    fn = partial(_run_chunk, detector.fresh().to_dict(), scenario, float(b), int(max_steps), seed, tag)
    recs = _map_replications(fn, range(reps), workers)
    times = np.array([r.stopping_time for r in recs], dtype=float)
    cens = np.array([r.censored for r in recs])
    add, se, rate = _summarize(times, cens)
    return AddResult(add, se, rate, reps, float(b), _censor_warnings(rate, "ADD"))


def simulate_ladders(detector: Detector, level: float, reps: int, max_steps: int, *, seed: int = 0,
                     workers: Optional[int] = None, tag: int = TAGS["calibrate"]) -> List[Ladder]:
    det = detector.pre_change_variant()
    fn = partial(_ladder_chunk, det.to_dict(), float(level), int(max_steps), seed, tag)
    return _map_replications(fn, range(reps), workers)


def ladder_arl(ladders: Sequence[Ladder], b: float, cap: Optional[int] = None):
    """``(arl, se, censor_rate)`` at threshold ``b`` from cached ladders."""
    times = np.empty(len(ladders))
    cens = np.zeros(len(ladders), dtype=bool)
    for i, lad in enumerate(ladders):
        t, c = lad.stopping_time(b)
        if cap is not None and t >= cap:
            c = c or t > cap
            t = min(t, cap)
        times[i] = t
        cens[i] = c
    return _summarize(times, cens)


def _crossing(f, lo: float, hi: float, target: float, tol: float = 1e-7) -> float:
    """Smallest b in (lo, hi] (to ``tol``) with ``f(b) >= target``; f non-decreasing."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate(detector: Detector, gammas: Sequence[float], *, reps: int = ARL_REPS, rel_tol: float = 0.05,
              bracket: Tuple[float, float] = (-3.0, 3.0), seed: int = 0, workers: Optional[int] = None,
              pilot_reps: int = 100, margin: float = 0.3) -> List[CalibrationResult]:
    """Thresholds whose Monte Carlo ARL matches each ``gamma`` within ``rel_tol``.

    The search for ``gamma`` is confined to ``[log gamma + bracket[0],
    log gamma + bracket[1]]``.  All gammas share one set of replications.
    """
    gammas = [float(g) for g in gammas]
    if not gammas or min(gammas) <= 1:
        raise InvalidParameter("target gamma must exceed 1")
    lo_off, hi_off = bracket
    if rel_tol >= 1:
        return [CalibrationResult(g, math.log(g), math.nan, math.nan, math.nan, 0, math.nan,
                                  (math.log(g) + lo_off, math.log(g) + hi_off)) for g in gammas]
    gmax = max(gammas)
    cap = arl_cap(gmax)
    top = math.log(gmax) + hi_off
    below = lambda x: float(np.nextafter(x, -math.inf))  # noqa: E731

    # pilot: find a simulation level whose ARL reaches the largest gamma
    npil = min(pilot_reps, reps)
    level = math.log(gmax)
    while True:
        pilot = simulate_ladders(detector, level, npil, cap, seed=seed, workers=workers)
        arl_top = ladder_arl(pilot, below(level), cap)[0]
        if arl_top >= gmax or level >= top:
            break
        level = min(top, level + float(np.clip(1.5 * math.log(gmax / arl_top), 0.25, 5.0)))
    if arl_top >= gmax:
        floor = math.log(gmax) + lo_off
        start = floor if floor >= below(level) or ladder_arl(pilot, floor, cap)[0] >= gmax else _crossing(
            lambda b: ladder_arl(pilot, b, cap)[0], floor, below(level), gmax, 1e-3)
        level = min(top, start + margin)

    # main run; raise the level until the largest gamma is reachable
    while True:
        ladders = simulate_ladders(detector, level, reps, cap, seed=seed, workers=workers)
        arl_top = ladder_arl(ladders, below(level), cap)[0]
        if arl_top >= gmax or level >= top:
            break
        log.info("calibration level %.3f reached ARL %.1f < %.1f; raising", level, arl_top, gmax)
        level = min(top, level + 0.5)

    results = []
    for g in gammas:
        gcap = arl_cap(g)
        lo = math.log(g) + lo_off
        hi = min(math.log(g) + hi_off, below(level))
        f = lambda b: ladder_arl(ladders, b, gcap)[0]  # noqa: E731
        diag = {"gamma": g, "bracket": (lo, math.log(g) + hi_off), "simulated_level": level, "reps": reps}
        f_lo = f(lo)
        if f_lo > g * (1 + rel_tol):
            raise CalibrationFailed(f"ARL {f_lo:.4g} at the lower bracket end b={lo:.4g} already exceeds "
                                    f"gamma={g:g}", {**diag, "arl_at_lower": f_lo})
        f_hi = f(hi)
        if f_hi < g * (1 - rel_tol):
            raise CalibrationFailed(f"ARL {f_hi:.4g} at the upper bracket end b={hi:.4g} stays below "
                                    f"gamma={g:g}", {**diag, "arl_at_upper": f_hi})
        b = lo if f_lo >= g else _crossing(f, lo, hi, g)
        arl, se, rate = ladder_arl(ladders, b, gcap)
        if abs(arl - g) > rel_tol * g:
            raise CalibrationFailed(f"no threshold gives ARL within {rel_tol:.0%} of {g:g} (closest {arl:.4g})",
                                    {**diag, "b": b, "arl": arl})
        results.append(CalibrationResult(g, float(b), arl, se, rate, reps, level, (lo, math.log(g) + hi_off)))
    return results


def calibrate_threshold(detector: Detector, target_gamma: float, rel_tol: float = 0.05, **kwargs) -> float:
    """Threshold ``b`` whose Monte Carlo ARL is within ``rel_tol`` of ``target_gamma``."""
    return calibrate(detector, [target_gamma], rel_tol=rel_tol, **kwargs)[0].b


@dataclass(frozen=True)
class ThresholdPolicy:
    """How a threshold is chosen: ``fixed`` b, ``log_gamma`` or ``calibrated`` to gamma."""

    mode: str = "calibrated"
    value: float = 2000.0
    rel_tol: float = 0.05
    bracket: Tuple[float, float] = field(default=(-3.0, 3.0))

    def __post_init__(self):
        if self.mode not in ("fixed", "log_gamma", "calibrated"):
            raise InvalidParameter(f"threshold mode must be fixed, log_gamma or calibrated, got {self.mode!r}")
        if self.mode != "fixed" and not self.value > 1:
            raise InvalidParameter("target gamma must exceed 1")

    def resolve(self, detector: Detector, **kwargs) -> float:
        if self.mode == "fixed":
            return float(self.value)
        if self.mode == "log_gamma":
            return math.log(self.value)
        return calibrate_threshold(detector, self.value, self.rel_tol, bracket=self.bracket, **kwargs)
