"""Point estimators of the post-change mean and their mean squared error.

Every estimator is a pure function of the sufficient statistic: the sample
mean of ``w`` unit-variance observations together with ``w``.  James-Stein
variants shrink toward an affine target ``mu + P_V xbar`` where ``P_V`` is
the orthogonal projection onto a d-dimensional subspace ``V``:

    theta_hat = t + a * (xbar - t),   a = 1 - (K - d - 2) / (w * ||xbar - t||^2)

with ``a`` clamped at zero for the positive-part variant.  Shrinking toward a
point is the ``d = 0`` case; the global mean is ``V = span(1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidParameter

KINDS = ("ml", "js_point", "js_global_mean", "js_subspace", "ls_projection")

_KIND_ALIASES = {
    "ml": "ml",
    "js": "js_point",
    "js_point": "js_point",
    "js-point": "js_point",
    "js_global_mean": "js_global_mean",
    "js-global-mean": "js_global_mean",
    "js_mean": "js_global_mean",
    "js_subspace": "js_subspace",
    "js-subspace": "js_subspace",
    "ls": "ls_projection",
    "ls_projection": "ls_projection",
    "ls-projection": "ls_projection",
}


def orthonormal_basis(Z, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the column space of a full-column-rank ``Z``.

    Uses a reduced QR factorization rather than the normal equations.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] == 0:
        return np.zeros((Z.shape[0], 0))
    Q, R = np.linalg.qr(Z, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= rtol * max(diag.max(), 1.0):
        raise InvalidParameter("target matrix Z must have full column rank")
    return Q


@dataclass(frozen=True, eq=False)
class EstimatorSpec:
    """Which estimator to apply and what it shrinks toward.

    Prefer the factory functions (``ml``, ``js_point``, ``js_global_mean``,
    ``js_subspace``, ``ls_projection``) over calling this directly.

    Attributes
    ----------
    kind : str
        One of ``KINDS``.
    K : int
        Ambient dimension.
    positive_part : bool
        Clamp the shrinkage factor at zero (JS kinds only).
    mu : ndarray, optional
        Point target, or offset of an affine target; must be orthogonal to V.
    basis : ndarray, optional
        Orthonormal K x d basis of the target subspace V.
    """

    kind: str
    K: int
    positive_part: bool = True
    mu: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise InvalidParameter(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        K = int(self.K)
        if K != self.K or K < 1:
            raise InvalidParameter(f"K must be a positive integer, got {self.K!r}")
        object.__setattr__(self, "K", K)

        mu = np.zeros(K) if self.mu is None else np.asarray(self.mu, dtype=float).reshape(-1)
        if mu.shape != (K,):
            raise InvalidParameter(f"target mu must have length K={K}")
        basis = np.zeros((K, 0)) if self.basis is None else np.asarray(self.basis, dtype=float)
        if basis.ndim != 2 or basis.shape[0] != K:
            raise InvalidParameter(f"subspace basis must be K x d with K={K}")
        for arr in (mu, basis):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "basis", basis)
        P = basis @ basis.T
        P.setflags(write=False)
        object.__setattr__(self, "projection", P)

        d = basis.shape[1]
        if d and not np.allclose(basis.T @ basis, np.eye(d), atol=1e-10):
            raise InvalidParameter("subspace basis must be orthonormal")
        if d and np.any(np.abs(basis.T @ mu) > 1e-10 * max(1.0, np.linalg.norm(mu))):
            raise InvalidParameter("affine offset mu must be orthogonal to the target subspace")

        if kind == "ml":
            if d or np.any(mu):
                raise InvalidParameter("ML estimator takes no shrinkage target")
        elif kind == "js_point":
            if d:
                raise InvalidParameter("JS-point shrinks toward a point; use js_subspace for a subspace")
            if K < 3:
                raise InvalidParameter(
                    f"JS-point needs K >= 3 (the sample mean is only inadmissible when K >= 3), got K={K}"
                )
        elif kind == "js_global_mean":
            if d != 1:
                raise InvalidParameter("global-mean JS uses V = span(1)")
            if K < 4:
                raise InvalidParameter(f"global-mean JS needs K >= 4 to dominate the MLE, got K={K}")
        elif kind == "js_subspace":
            if not d < K - 2:
                raise InvalidParameter(
                    f"subspace JS needs d < K - 2 to dominate the MLE, got d={d}, K={K}"
                )
        elif kind == "ls_projection":
            if d < 1:
                raise InvalidParameter("LS projection needs a subspace of dimension >= 1")

    @property
    def d(self) -> int:
        return int(self.basis.shape[1])

    @property
    def is_js(self) -> bool:
        return self.kind.startswith("js")

    @property
    def shrink_constant(self) -> float:
        """Numerator ``K - d - 2`` of the JS shrinkage factor."""
        return float(self.K - self.d - 2)

    def target(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return self.mu + (xbar @ self.basis) @ self.basis.T

    def describe(self) -> str:
        pp = "+" if (self.is_js and self.positive_part) else ""
        return f"{self.kind}{pp}(K={self.K}, d={self.d})"

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "K": self.K, "positive_part": bool(self.positive_part)}
        if np.any(self.mu):
            out["mu"] = self.mu.tolist()
        if self.kind in ("js_subspace", "ls_projection") and self.d:
            out["basis"] = self.basis.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorSpec":
        kind = _KIND_ALIASES.get(str(d["kind"]).lower(), d["kind"])
        K = int(d["K"])
        pp = bool(d.get("positive_part", True))
        if kind == "ml":
            return ml(K)
        if kind == "js_point":
            return js_point(K, d.get("mu"), positive_part=pp)
        if kind == "js_global_mean":
            return js_global_mean(K, positive_part=pp)
        basis = np.asarray(d.get("basis", np.zeros((K, 0))), dtype=float)
        if kind == "js_subspace":
            return cls("js_subspace", K, pp, mu=d.get("mu"), basis=basis)
        return cls("ls_projection", K, False, basis=basis)


def ml(K: int) -> EstimatorSpec:
    return EstimatorSpec("ml", K, positive_part=False)


def js_point(K: int, mu=None, positive_part: bool = True) -> EstimatorSpec:
    return EstimatorSpec("js_point", K, positive_part, mu=mu)


def js_global_mean(K: int, positive_part: bool = True) -> EstimatorSpec:
    if K < 1:
        raise InvalidParameter(f"K must be a positive integer, got {K!r}")
    return EstimatorSpec("js_global_mean", K, positive_part, basis=np.full((K, 1), 1.0 / math.sqrt(K)))


def js_subspace(Z=None, positive_part: bool = True, K: Optional[int] = None, mu=None) -> EstimatorSpec:
    """JS toward ``colspace(Z)`` (plus an optional orthogonal offset ``mu``).

    ``Z=None`` gives the zero-dimensional target ``{mu}``.
    """
    if Z is None:
        if K is None:
            K = len(mu)
        basis = np.zeros((K, 0))
    else:
        basis = orthonormal_basis(Z)
        K = basis.shape[0]
    return EstimatorSpec("js_subspace", K, positive_part, mu=mu, basis=basis)


def ls_projection(Z) -> EstimatorSpec:
    basis = orthonormal_basis(Z)
    return EstimatorSpec("ls_projection", basis.shape[0], False, basis=basis)


@dataclass(frozen=True, eq=False)
class SufficientStat:
    """Sample mean of ``w`` observations."""

    mean: np.ndarray
    w: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        if int(self.w) != self.w or self.w < 1:
            raise InvalidParameter(f"sample count w must be an integer >= 1, got {self.w!r}")

    @classmethod
    def from_window(cls, X) -> "SufficientStat":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X.mean(axis=0), X.shape[0])


def shrinkage_factor(spec: EstimatorSpec, resid_sq, w):
    """Multiplier ``a`` on ``xbar - target``; vectorized over ``resid_sq``.

    A zero residual returns the target itself (``a = 0``).
    """
    resid_sq = np.asarray(resid_sq, dtype=float)
    if spec.kind == "ml":
        return np.ones_like(resid_sq)
    if spec.kind == "ls_projection":
        return np.zeros_like(resid_sq)
    safe = np.where(resid_sq > 0.0, resid_sq, 1.0)
    a = np.where(resid_sq > 0.0, 1.0 - spec.shrink_constant / (w * safe), 0.0)
    if spec.positive_part:
        a = np.maximum(a, 0.0)
    return a


def estimate(spec: EstimatorSpec, stat: SufficientStat) -> np.ndarray:
    """Apply the estimator to one sample mean (or a stack of them, row-wise)."""
    xbar = stat.mean
    if xbar.shape[-1] != spec.K:
        raise InvalidParameter(f"sample mean has length {xbar.shape[-1]}, estimator expects K={spec.K}")
    if spec.kind == "ml":
        return xbar.copy()
    t = spec.target(xbar)
    if spec.kind == "ls_projection":
        return t
    e = xbar - t
    a = shrinkage_factor(spec, np.sum(e * e, axis=-1), stat.w)
    return t + np.expand_dims(a, -1) * e


def mse_closed_ml(K: int, w: int) -> float:
    """MSE of the sample mean of ``w`` draws from N(theta, I_K)."""
    if K < 1 or w < 1:
        raise InvalidParameter("K and w must be >= 1")
    return K / w


def mse_closed_js_on_target(d: int, w: int) -> float:
    """MSE of plain JS toward a d-dimensional target containing theta."""
    if d < 0 or w < 1:
        raise InvalidParameter("need d >= 0 and w >= 1")
    return (d + 2) / w


def squared_errors(spec: EstimatorSpec, theta, w: int, Z: np.ndarray) -> np.ndarray:
    """Per-draw losses ``||theta_hat - theta||^2`` for standard-normal draws ``Z``.

    Each row of ``Z`` gives one sample mean ``theta + Z_i / sqrt(w)``.
    """
    theta = np.asarray(theta, dtype=float)
    xbar = theta + Z / math.sqrt(w)
    err = estimate(spec, SufficientStat(xbar, w)) - theta
    return np.einsum("ij,ij->i", err, err)


def mse_monte_carlo(spec: EstimatorSpec, theta, w: int, reps: int, seed=0, batch: int = 100_000):
    """Monte Carlo MSE of ``spec`` at ``theta`` with window ``w``.

    Returns ``(mse, standard_error)``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.K,):
        raise InvalidParameter(f"theta must have length K={spec.K}")
    if reps < 1:
        raise InvalidParameter("reps must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < reps:
        m = min(batch, reps - done)
        loss = squared_errors(spec, theta, w, rng.standard_normal((m, spec.K)))
        total += loss.sum()
        total_sq += np.dot(loss, loss)
        done += m
    mean = total / reps
    if reps < 2:
        return float(mean), float("nan")
    var = max(total_sq - reps * mean * mean, 0.0) / (reps - 1)
    return float(mean), float(math.sqrt(var / reps))


def mse_compare(specs, theta, w: int, reps: int, seed=0, batch: int = 100_000):
    """Monte Carlo MSE of several estimators on the same draws.

    Returns ``(means, ses, diff_se)`` where ``diff_se[i, j]`` is the standard
    error of ``mse_i - mse_j`` estimated from the paired losses.
    """
    specs = list(specs)
    theta = np.asarray(theta, dtype=float)
    if reps < 2:
        raise InvalidParameter("reps must be >= 2 for standard errors")
    K = theta.size
    if any(s.K != K for s in specs):
        raise InvalidParameter("all estimators must share the dimension of theta")
    m = len(specs)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    s1 = np.zeros(m)
    s2 = np.zeros((m, m))
    done = 0
    while done < reps:
        nb = min(batch, reps - done)
        Z = rng.standard_normal((nb, K))
        L = np.stack([squared_errors(s, theta, w, Z) for s in specs])
        s1 += L.sum(axis=1)
        s2 += L @ L.T
        done += nb
    mean = s1 / reps
    cov = (s2 - reps * np.outer(mean, mean)) / (reps - 1) / reps
    var = np.diag(cov)
    diff_var = var[:, None] + var[None, :] - 2 * cov
    return mean, np.sqrt(np.maximum(var, 0.0)), np.sqrt(np.maximum(diff_var, 0.0))
