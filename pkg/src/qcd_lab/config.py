"""INI-style experiment configuration.

Sections and keys are fixed; anything unknown is an error naming the
offending ``section.key``.  Keys are case sensitive (``K`` is the number of
streams, ``k`` the number of affected streams).  Lists are comma separated;
integer ranges may be written ``a..b`` (inclusive).

Example::

    [run]
    seed = 7
    output = fig5.csv

    [experiment]
    name = sparse_sweep
    K = 20
    ks = 1..20
    gamma = 2000
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from .detectors import (SRRS, WARMUP_MODES, CuSum, Detector, ParallelWLCuSum, WindowGLR, WLCuSum)
from .errors import BoundInapplicable, ConfigError, InvalidParameter
from .estimators import KINDS, EstimatorSpec, js_global_mean, js_point, js_subspace, ls_projection, ml
from .experiments import DETECTION_TESTS, EXPERIMENTS, SPATIAL_TESTS, build_test, default_bracket
from .harness import ThresholdPolicy, default_workers
from .model import SpatialModel, Scenario, scenario_dense, scenario_equal, scenario_sparse, scenario_spatial


def _bad(key, message) -> ConfigError:
    return ConfigError(message, key=key)


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in s.replace(";", ",").split(",") if p.strip())


def _ints(s: str) -> Tuple[int, ...]:
    out = []
    for part in s.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(_int(a), _int(b) + 1))
        else:
            out.append(_int(part))
    return tuple(out)


def _strs(s: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options):
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return parse


def _nu(s: str):
    return None if s.strip().lower() == "never" else _int(s)


def _opt_float(s: str):
    return None if s.strip().lower() in ("none", "off", "") else float(s)


Parser = Callable[[str], Any]

SCHEMA: Dict[str, Dict[str, Tuple[Parser, Any]]] = {
    "run": {
        "seed": (_int, 0),
        "output": (str, ""),
        "workers": (_int, None),
    },
    "scenario": {
        "type": (_choice("dense", "sparse", "equal", "spatial", "custom"), "dense"),
        "K": (_int, 10),
        "k": (_int, 1),
        "theta": (_floats, None),
        "nu": (_nu, 1),
        "r": (float, 0.0),
        "sources": (_floats, (20.0, 80.0)),
        "beta": (_floats, None),
    },
    "detector": {
        "kind": (_choice("cusum", "wl_cusum", "parallel_wl_cusum", "glr", "srrs"), "parallel_wl_cusum"),
        "estimator": (_choice(*KINDS), "js_global_mean"),
        "positive_part": (_bool, True),
        "target": (_choice("none", "spatial", "theta"), "none"),
        "mu": (_floats, None),
        "window": (_int, 10),
        "max_window": (_int, 200),
        "warmup": (_choice(*WARMUP_MODES), "hold"),
        "literal": (_bool, False),
        "prune_delta": (_opt_float, None),
    },
    "threshold": {
        # unset: log_gamma for arl/add/trace, calibrated for calibrate/experiment
        "mode": (_choice("fixed", "log_gamma", "calibrated"), None),
        "b": (float, None),
        "gamma": (float, 2000.0),
        "rel_tol": (float, 0.05),
        "bracket": (_floats, None),
    },
    "simulation": {
        "arl_reps": (_int, 1000),
        "add_reps": (_int, 2000),
        "max_steps": (_int, None),
        "steps": (_int, 200),
    },
    "experiment": {
        "name": (_choice(*EXPERIMENTS), "k_sweep"),
        "K": (_int, None),
        "Ks": (_ints, None),
        "k": (_int, None),
        "ks": (_ints, None),
        "w": (_int, None),
        "reps": (_int, None),
        "mse_reps": (_int, None),
        "theta_norms": (_floats, None),
        "bs": (_floats, None),
        "gamma": (float, None),
        "gammas": (_floats, None),
        "gammas_at_zero": (_floats, None),
        "rs": (_floats, None),
        "sources": (_floats, None),
        "tests": (_strs, None),
        "window_rule": (_choice("bound", "approx"), None),
        "window_b": (float, None),
        "max_window": (_int, None),
    },
}

# experiment keys accepted by each driver (config key -> keyword argument)
EXPERIMENT_ARGS = {
    "mse_curves": {"K": "K", "w": "w", "theta_norms": "theta_norms", "reps": "reps"},
    "bound_eval": {"Ks": "Ks", "bs": "bs", "window_rule": "window_rule", "window_b": "window_b",
                   "max_window": "w_max", "mse_reps": "mse_reps"},
    "arl_add": {"Ks": "Ks", "gammas": "gammas", "tests": "tests", "max_window": "max_window"},
    "k_sweep": {"Ks": "Ks", "gamma": "gamma", "tests": "tests", "max_window": "max_window"},
    "sparse_sweep": {"K": "K", "ks": "ks", "gamma": "gamma", "tests": "tests", "max_window": "max_window"},
    "spatial": {"K": "K", "rs": "rs", "gamma": "gamma", "gammas_at_zero": "gammas_at_zero", "sources": "sources",
                "tests": "tests", "max_window": "max_window"},
}


@dataclass
class ExperimentConfig:
    """Fully resolved configuration; every key present with its typed value."""

    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __getitem__(self, key: str):
        sec, _, name = key.partition(".")
        return self.sections[sec][name]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    @property
    def workers(self) -> int:
        w = self["run.workers"]
        return default_workers() if w is None else w

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
                for s, d in self.sections.items()}

    def build_scenario(self) -> Tuple[Scenario, Optional[np.ndarray]]:
        sc = self.sections["scenario"]
        kind, K, nu = sc["type"], sc["K"], sc["nu"]
        if kind == "dense":
            return scenario_dense(K, nu), None
        if kind == "sparse":
            return scenario_sparse(K, sc["k"], nu), None
        if kind == "equal":
            return scenario_equal(K, nu), None
        if kind == "spatial":
            return scenario_spatial(SpatialModel(K, sc["sources"], sc["r"], sc["beta"]), nu)
        if sc["theta"] is None:
            raise _bad("scenario.theta", "a custom scenario needs theta")
        return Scenario(np.asarray(sc["theta"]), nu, "custom"), None

    def build_estimator(self, K: int, Z=None, theta=None) -> EstimatorSpec:
        d = self.sections["detector"]
        kind, pp, target = d["estimator"], d["positive_part"], d["target"]
        if kind == "ml":
            return ml(K)
        if kind == "js_point":
            return js_point(K, d["mu"], positive_part=pp)
        if kind == "js_global_mean":
            return js_global_mean(K, positive_part=pp)
        if target == "none":
            raise _bad("detector.target", f"{kind} needs a subspace target (spatial or theta)")
        basis = Z if target == "spatial" else None if theta is None else np.asarray(theta)[:, None]
        if basis is None:
            raise _bad("detector.target", "target = spatial needs scenario.type = spatial")
        return js_subspace(basis, positive_part=pp) if kind == "js_subspace" else ls_projection(basis)

    def build_detector(self) -> Detector:
        d = self.sections["detector"]
        scen, Z = self.build_scenario()
        K = scen.K
        if d["kind"] == "cusum":
            return CuSum(scen.theta)
        if d["kind"] == "glr":
            return WindowGLR(K, d["max_window"])
        est = self.build_estimator(K, Z, scen.theta)
        if d["kind"] == "wl_cusum":
            return WLCuSum(est, d["window"], warmup=d["warmup"])
        if d["kind"] == "parallel_wl_cusum":
            return ParallelWLCuSum(est, d["max_window"], warmup=d["warmup"])
        return SRRS(est, literal=d["literal"], prune_delta=d["prune_delta"])

    def threshold_mode(self, default: str = "log_gamma") -> str:
        return self["threshold.mode"] or default

    def threshold_policy(self, default_mode: str = "log_gamma") -> ThresholdPolicy:
        t = self.sections["threshold"]
        mode = self.threshold_mode(default_mode)
        if mode == "fixed":
            if t["b"] is None:
                raise _bad("threshold.b", "mode = fixed needs a threshold b")
            return ThresholdPolicy("fixed", t["b"], t["rel_tol"])
        bracket = t["bracket"] or (-3.0, 3.0)
        if t["bracket"] is None and self["detector.kind"] == "glr":
            bracket = default_bracket("glr", self["scenario.K"])
        if t["bracket"] is None and self["detector.kind"] == "srrs":
            bracket = default_bracket("srrs", self["scenario.K"])
        return ThresholdPolicy(mode, t["gamma"], t["rel_tol"], tuple(bracket))

    def experiment_kwargs(self) -> Dict[str, Any]:
        e = self.sections["experiment"]
        name = e["name"]
        allowed = EXPERIMENT_ARGS[name]
        kwargs = {}
        for key, val in e.items():
            if key == "name" or val is None:
                continue
            if key not in allowed:
                raise _bad(f"experiment.{key}", f"not a parameter of experiment {name!r}")
            kwargs[allowed[key]] = val
        return kwargs


def load_raw(path) -> Dict[str, Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise _bad(None, f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as e:
        raise _bad(None, f"cannot parse {path}: {e}") from e
    return {s: dict(cp.items(s)) for s in cp.sections()}


def apply_overrides(raw: Dict[str, Dict[str, str]], overrides) -> Dict[str, Dict[str, str]]:
    out = {s: dict(v) for s, v in raw.items()}
    for item in overrides or ():
        key, eq, val = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not eq or not dot or not name:
            raise _bad(item, "overrides must look like section.key=value")
        out.setdefault(sec, {})[name] = val.strip()
    return out


def _check_estimator_rules(cfg: ExperimentConfig, Ks):
    """Build each test once per K so invalid combinations fail before any simulation."""
    name = cfg["experiment.name"]
    if name in ("mse_curves", "bound_eval"):
        for K in Ks:
            js_global_mean(K) if name == "bound_eval" else js_point(K)
        return
    tests = cfg["experiment.tests"] or (SPATIAL_TESTS if name == "spatial" else DETECTION_TESTS)
    Z = None
    if name == "spatial":
        sources = cfg["experiment.sources"] or (20.0, 80.0)
        _, Z = scenario_spatial(SpatialModel(Ks[0], sources, 0.0))
    for K in Ks:
        for t in tests:
            build_test(t, K, Z)


def validate_config(raw: Dict[str, Dict[str, str]], command: Optional[str] = None) -> ExperimentConfig:
    """Resolve defaults and check every module invariant up front."""
    sections: Dict[str, Dict[str, Any]] = {}
    for sec in raw:
        if sec not in SCHEMA:
            raise _bad(sec, f"unknown section [{sec}]; expected one of {', '.join(SCHEMA)}")
    for sec, keys in SCHEMA.items():
        given = raw.get(sec, {})
        for k in given:
            if k not in keys:
                raise _bad(f"{sec}.{k}", f"unknown key {sec}.{k}; expected one of {', '.join(keys)}")
        vals = {}
        for k, (parse, default) in keys.items():
            if k in given:
                try:
                    vals[k] = parse(given[k])
                except (ValueError, TypeError) as e:
                    raise _bad(f"{sec}.{k}", f"bad value for {sec}.{k}: {e}") from e
            else:
                vals[k] = default
        sections[sec] = vals
    cfg = ExperimentConfig(sections)
    try:
        if command in (None, "arl", "add", "calibrate", "trace"):
            _validate_run(cfg, command)
        if command in (None, "experiment"):
            kw = cfg.experiment_kwargs()
            name = cfg["experiment.name"]
            Ks = kw.get("Ks") or ((kw["K"],) if "K" in kw else _driver_default_Ks(name))
            _check_estimator_rules(cfg, Ks)
            if cfg.threshold_mode("calibrated") == "fixed":
                raise _bad("threshold.mode", "experiments need calibrated or log_gamma thresholds")
            for key in ("gamma", "gammas", "gammas_at_zero"):
                vals = kw.get(key)
                vals = (vals,) if isinstance(vals, float) else vals or ()
                if any(g <= 1 for g in vals):
                    raise _bad(f"experiment.{key}", "target ARL gamma must exceed 1")
    except (InvalidParameter, BoundInapplicable) as e:
        raise _bad(_guess_key(str(e)), str(e)) from e
    return cfg


def _driver_default_Ks(name):
    import inspect
    params = inspect.signature(EXPERIMENTS[name]).parameters
    if "Ks" in params:
        return tuple(params["Ks"].default)
    return (params["K"].default,)


def _validate_run(cfg: ExperimentConfig, command):
    scen, _ = cfg.build_scenario()
    cfg.build_detector()
    pol = cfg.threshold_policy("calibrated" if command == "calibrate" else "log_gamma")
    if command == "add" and scen.nu != 1:
        raise _bad("scenario.nu", "ADD is estimated with the change at nu = 1")
    if command == "calibrate" and pol.mode == "fixed":
        raise _bad("threshold.mode", "calibrate needs a target gamma, not a fixed b")
    for key in ("arl_reps", "add_reps", "steps"):
        if cfg[f"simulation.{key}"] < 1:
            raise _bad(f"simulation.{key}", f"simulation.{key} must be >= 1")
    ms = cfg["simulation.max_steps"]
    if ms is not None and ms < 1:
        raise _bad("simulation.max_steps", "max_steps must be >= 1")
    if pol.mode != "fixed" and not cfg["threshold.gamma"] > 1:
        raise _bad("threshold.gamma", "target ARL gamma must exceed 1")
    if not math.isfinite(cfg["threshold.rel_tol"]) or cfg["threshold.rel_tol"] <= 0:
        raise _bad("threshold.rel_tol", "rel_tol must be positive")


def _guess_key(msg: str) -> Optional[str]:
    m = msg.lower()
    for needle, key in (("window", "detector.window"), ("subspace", "detector.target"), ("js", "detector.estimator"),
                        ("sources", "scenario.sources"), ("k must", "scenario.K"), ("nu", "scenario.nu"),
                        ("theta", "scenario.theta"), ("1 <= k", "scenario.k")):
        if needle in m:
            return key
    return None
