"""Closed-form delay analysis for the window-limited CuSum.

A plug-in test whose estimate has mean squared error ``mse`` gains on
average ``I - mse / 2`` nats per post-change sample, where ``I = |theta|^2/2``
is the KL divergence.  The delay bound and the simple approximation below
are both driven by that drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Union

import numpy as np

from .errors import BoundInapplicable, InvalidParameter


def kl_divergence(theta) -> float:
    theta = np.asarray(theta, dtype=float)
    return 0.5 * float(theta @ theta)


def drift(I: float, mse: float) -> float:
    """Expected per-sample increment ``I - mse / 2``; may be negative."""
    if not I > 0:
        raise InvalidParameter(f"KL divergence must be positive, got {I!r}")
    return I - 0.5 * mse


@dataclass(frozen=True)
class BoundInputs:
    b: float
    w: int
    I: float
    mse: float

    def __post_init__(self):
        if not self.b > 0:
            raise InvalidParameter(f"threshold b must be positive, got {self.b!r}")
        if int(self.w) != self.w or self.w < 0:
            raise InvalidParameter(f"window w must be a non-negative integer, got {self.w!r}")
        if not self.I > 0:
            raise InvalidParameter(f"KL divergence I must be positive, got {self.I!r}")
        if not self.mse >= 0:
            raise InvalidParameter(f"mse must be non-negative, got {self.mse!r}")


def _positive_drift(inp: BoundInputs, coef: float) -> float:
    g = inp.I - coef * inp.mse
    if g <= 0:
        raise BoundInapplicable(
            f"drift I - {coef:g}*mse = {g:.6g} is not positive (I={inp.I:g}, mse={inp.mse:g}, w={inp.w}); "
            "the window is too small for this change"
        )
    return g


def delay_upper_bound(inp: BoundInputs, variant: str = "half") -> float:
    """Worst-case delay bound ``(b + (w+1) I + 2) / (I - mse/2)``.

    ``variant="full"`` divides by ``I - mse`` instead, a looser form that
    charges the whole estimation error against the drift.
    """
    coef = {"half": 0.5, "full": 1.0}.get(variant)
    if coef is None:
        raise InvalidParameter(f"unknown bound variant {variant!r}")
    return (inp.b + (inp.w + 1) * inp.I + 2.0) / _positive_drift(inp, coef)


def delay_approximation(inp: BoundInputs) -> float:
    """``w + b / (I - mse/2)``: warm-up plus the time to climb ``b`` at the drift."""
    return inp.w + inp.b / _positive_drift(inp, 0.5)


def min_window_for_positive_drift(theta_norm_sq: float, K: int) -> int:
    """Smallest ``w >= K / |theta|^2``; ML (and hence JS) has positive drift there."""
    if not theta_norm_sq > 0:
        raise InvalidParameter(f"|theta|^2 must be positive, got {theta_norm_sq!r}")
    return max(1, math.ceil(K / theta_norm_sq - 1e-12))


MseModel = Union[str, Callable[[int], float], Dict[int, float]]


def _mse_fn(mse_model: MseModel, K: int) -> Callable[[int], float]:
    if mse_model == "ml":
        return lambda w: K / w
    if isinstance(mse_model, dict):
        return lambda w: mse_model[w]
    if callable(mse_model):
        return mse_model
    raise InvalidParameter(f"mse_model must be 'ml', a callable or a table, got {mse_model!r}")


def bound_minimizing_window(b: float, I: float, K: int, mse_model: MseModel = "ml", w_max: int = 200,
                            objective: str = "bound") -> int:
    """Integer window in ``[1, w_max]`` minimizing the delay bound.

    Windows with non-positive drift are skipped; ties go to the smaller
    window.  ``objective="approx"`` minimizes the approximation instead.
    """
    fn = _mse_fn(mse_model, K)
    target = {"bound": delay_upper_bound, "approx": delay_approximation}.get(objective)
    if target is None:
        raise InvalidParameter(f"unknown objective {objective!r}")
    best_w, best = None, math.inf
    for w in range(1, int(w_max) + 1):
        mse = fn(w)
        if I - 0.5 * mse <= 0:
            continue
        val = target(BoundInputs(b, w, I, mse))
        if val < best:
            best_w, best = w, val
    if best_w is None:
        raise BoundInapplicable(f"no window in [1, {w_max}] gives positive drift (I={I:g}, K={K})")
    return best_w


def bound_table(bs: Iterable[float], w: int, I: float, mse: float):
    """Rows ``(b, w, I, mse, bound, approx)``."""
    rows = []
    for b in bs:
        inp = BoundInputs(b, w, I, mse)
        rows.append((b, w, I, mse, delay_upper_bound(inp), delay_approximation(inp)))
    return rows
