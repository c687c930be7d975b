"""Gaussian mean-shift observation model and post-change scenarios.

Observations are normalized so the pre-change law is N(0, I_K).  From the
change time ``nu`` onward the mean is ``theta``.

Random numbers come from numpy's ``PCG64`` bit generator seeded through a
``SeedSequence``; each Monte Carlo replication gets its own child stream
keyed by ``(master_seed, tag, index)``.  Standard normals are drawn with
numpy's ziggurat sampler (``Generator.standard_normal``), row-major, one
length-K vector per time step.  Drawing a block of rows consumes the stream
exactly as drawing the rows one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameter

SENSOR_SPAN = 100.0


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Scenario:
    """Post-change mean specification for a K-stream Gaussian model.

    ``nu`` is the change time (1-based); ``None`` means the change never
    happens and every observation is pre-change.
    """

    theta: np.ndarray
    nu: Optional[int] = 1
    label: str = ""
    K: int = field(init=False)

    def __post_init__(self):
        theta = _frozen(self.theta).reshape(-1)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "K", int(theta.size))
        if self.K < 1:
            raise InvalidParameter("theta must have at least one component")
        if not np.all(np.isfinite(theta)):
            raise InvalidParameter("theta must be finite")
        if self.nu is not None:
            if int(self.nu) != self.nu or self.nu < 1:
                raise InvalidParameter(f"nu must be a positive integer or None, got {self.nu!r}")
            object.__setattr__(self, "nu", int(self.nu))
            if not np.any(theta != 0.0):
                raise InvalidParameter("theta must be nonzero when a change occurs")

    @property
    def theta_norm(self) -> float:
        return float(np.linalg.norm(self.theta))

    def pre_change(self) -> "Scenario":
        """Same scenario with the change disabled (ARL regime)."""
        return replace(self, nu=None)

    def with_change(self, nu: int = 1) -> "Scenario":
        return replace(self, nu=nu)

    def mean_at(self, n: int) -> np.ndarray:
        if self.nu is not None and n >= self.nu:
            return self.theta
        return np.zeros(self.K)

    def to_dict(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta],
            "nu": "never" if self.nu is None else self.nu,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        nu = d.get("nu", 1)
        if nu in ("never", None):
            nu = None
        return cls(theta=np.asarray(d["theta"], dtype=float), nu=nu, label=d.get("label", ""))


def attenuation(s, z):
    """Inverse-square attenuation ``min(1, |s - z|^-2)``; 1 at zero distance."""
    d2 = np.square(np.subtract(s, z, dtype=float))
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, 1.0 / d2)


@dataclass(frozen=True, eq=False)
class SpatialModel:
    """Sensors on [0, 100] observing M point sources through ``attenuation``.

    Sources are displaced by ``r`` toward the middle of the sensor span, so the
    default pair (20, 80) moves to (20 + r, 80 - r).  ``beta`` gives the
    relative source strengths; its scale is fixed by the scenario builder.
    """

    K: int = 20
    sources: Sequence[float] = (20.0, 80.0)
    r: float = 0.0
    beta: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.K < 2:
            raise InvalidParameter("spatial model needs K >= 2 sensors")
        M = len(self.sources)
        if M < 1:
            raise InvalidParameter("spatial model needs at least one source")
        if M >= self.K - 2:
            raise InvalidParameter(
                f"need M < K - 2 sources for subspace shrinkage to dominate (M={M}, K={self.K})"
            )
        beta = np.ones(M) if self.beta is None else np.asarray(self.beta, dtype=float)
        if beta.shape != (M,):
            raise InvalidParameter("beta must have one entry per source")
        object.__setattr__(self, "sources", tuple(float(z) for z in self.sources))
        object.__setattr__(self, "beta", tuple(float(b) for b in beta))

    @property
    def M(self) -> int:
        return len(self.sources)

    @property
    def sensor_positions(self) -> np.ndarray:
        k = np.arange(self.K)
        return SENSOR_SPAN * k / (self.K - 1)

    def source_positions(self, r: Optional[float] = None) -> np.ndarray:
        r = self.r if r is None else r
        z = np.asarray(self.sources)
        return z + r * np.sign(SENSOR_SPAN / 2 - z)

    def design_matrix(self, r: float = 0.0) -> np.ndarray:
        """K x M matrix with entries ``attenuation(s_k, z_m)``."""
        s = self.sensor_positions[:, None]
        z = self.source_positions(r)[None, :]
        return attenuation(s, z)


def scenario_dense(K: int, nu: Optional[int] = 1) -> Scenario:
    """Change hits all streams with intensities proportional to 1..K, unit norm."""
    if int(K) != K or K < 1:
        raise InvalidParameter(f"K must be a positive integer, got {K!r}")
    raw = np.arange(1, K + 1, dtype=float)
    return Scenario(raw / np.linalg.norm(raw), nu=nu, label=f"dense-K{K}")


def scenario_sparse(K: int, k: int, nu: Optional[int] = 1) -> Scenario:
    """First ``k`` of ``K`` streams shift by ``k**-0.5``; unit norm."""
    if int(K) != K or K < 1:
        raise InvalidParameter(f"K must be a positive integer, got {K!r}")
    if int(k) != k or not 1 <= k <= K:
        raise InvalidParameter(f"need 1 <= k <= K, got k={k!r}, K={K}")
    theta = np.zeros(K)
    theta[:k] = 1.0 / math.sqrt(k)
    return Scenario(theta, nu=nu, label=f"sparse-K{K}-k{k}")


def scenario_equal(K: int, nu: Optional[int] = 1) -> Scenario:
    """All streams shift by ``K**-0.5`` (the bound-evaluation setting)."""
    if int(K) != K or K < 1:
        raise InvalidParameter(f"K must be a positive integer, got {K!r}")
    return Scenario(np.full(K, 1.0 / math.sqrt(K)), nu=nu, label=f"equal-K{K}")


def scenario_spatial(model: SpatialModel, nu: Optional[int] = 1):
    """Build the displaced-source scenario and the nominal design matrix.

    Returns ``(scenario, Z)`` where ``Z`` is the undisplaced (r = 0) design
    matrix the detector should shrink toward.  ``beta`` is scaled so that
    ``||Z beta|| = 1``; the true mean uses the displaced sources.
    """
    Z0 = model.design_matrix(0.0)
    beta = np.asarray(model.beta)
    scale = np.linalg.norm(Z0 @ beta)
    if scale == 0.0:
        raise InvalidParameter("beta gives a zero signal under the nominal model")
    beta = beta / scale
    theta = model.design_matrix(model.r) @ beta
    label = f"spatial-K{model.K}-M{model.M}-r{model.r:g}"
    return Scenario(theta, nu=nu, label=label), Z0


def replication_rng(master_seed: int, index: int, tag: int = 0) -> np.random.Generator:
    """Independent generator for replication ``index`` of stream family ``tag``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(tag), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def draw_observation(scenario: Scenario, n: int, rng: np.random.Generator) -> np.ndarray:
    """One observation at (1-based) time ``n``."""
    if n < 1:
        raise InvalidParameter("time index n must be >= 1")
    return scenario.mean_at(n) + rng.standard_normal(scenario.K)


class ObservationStream:
    """Sequential source of observations for one replication.

    ``next_block(m)`` returns the next ``m`` rows; the values coincide with
    repeated ``draw_observation`` calls on the same generator.
    """

    def __init__(self, scenario: Scenario, rng: np.random.Generator):
        self.scenario = scenario
        self.rng = rng
        self.n = 0

    def next_block(self, m: int) -> np.ndarray:
        sc = self.scenario
        X = self.rng.standard_normal((m, sc.K))
        if sc.nu is not None:
            first = max(sc.nu - self.n - 1, 0)
            if first < m:
                X[first:] += sc.theta
        self.n += m
        return X

    def __iter__(self):
        while True:
            yield self.next_block(1)[0]
