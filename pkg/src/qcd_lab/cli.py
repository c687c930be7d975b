"""Command-line entry point: ``qcd-lab <command> [options]``.

Exit status is 0 on success, 1 for configuration or validation errors and 2
for runtime failures (for example a calibration that cannot bracket gamma).
"""

from __future__ import annotations

import argparse
import inspect
import logging
import sys
import time
from typing import List, Optional

from .config import ExperimentConfig, apply_overrides, load_raw, validate_config
from .detectors import trace
from .errors import BoundInapplicable, CalibrationFailed, ConfigError, InvalidParameter
from .experiments import EXPERIMENTS, ThresholdBook
from .harness import calibrate, estimate_add, estimate_arl
from .model import ObservationStream, replication_rng
from .output import Table, result_files

log = logging.getLogger("qcd_lab")

COMMANDS = ("mse", "bound-eval", "arl", "add", "calibrate", "experiment", "trace")


def _csv(values) -> str:
    return ",".join(str(v) for v in values)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output CSV path (a .json sidecar is written next to it)")
    common.add_argument("--workers", type=int, help="worker processes for Monte Carlo loops")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qcd-lab", description="Quickest change detection simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mse", parents=[common], help="estimator MSE against |theta|")
    s.add_argument("--K", type=int)
    s.add_argument("--w", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--theta-norms", type=float, nargs="+")

    s = sub.add_parser("bound-eval", parents=[common], help="single-window delay vs. bound and approximation")
    s.add_argument("--K", type=int, nargs="+")
    s.add_argument("--b", type=float, nargs="+")
    s.add_argument("--reps", type=int)
    s.add_argument("--window-rule", choices=("bound", "approx"))

    for name, what in (("arl", "average run length with no change"), ("add", "average detection delay")):
        s = sub.add_parser(name, parents=[common], help=what)
        s.add_argument("--b", type=float, help="fixed threshold")
        s.add_argument("--gamma", type=float, help="target ARL when no fixed b is given")
        s.add_argument("--reps", type=int)
        s.add_argument("--max-steps", type=int)

    s = sub.add_parser("calibrate", parents=[common], help="threshold matching a target ARL")
    s.add_argument("--gamma", type=float)
    s.add_argument("--rel-tol", type=float)
    s.add_argument("--reps", type=int)

    s = sub.add_parser("experiment", parents=[common], help="run a named experiment driver")
    s.add_argument("--name", choices=sorted(EXPERIMENTS))

    s = sub.add_parser("trace", parents=[common], help="per-step statistic of one simulated run")
    s.add_argument("--steps", type=int)
    s.add_argument("--nu", help="change time (or 'never')")
    s.add_argument("--b", type=float)
    return p


def _flag_overrides(args) -> List[str]:
    o: List[str] = []
    c = args.command

    def put(key, val):
        if val is not None:
            o.append(f"{key}={val}")

    put("run.seed", args.seed)
    put("run.workers", args.workers)
    put("run.output", args.out)
    if c == "mse":
        o.append("experiment.name=mse_curves")
        put("experiment.K", args.K)
        put("experiment.w", args.w)
        put("experiment.reps", args.reps)
        put("experiment.theta_norms", args.theta_norms and _csv(args.theta_norms))
    elif c == "bound-eval":
        o.append("experiment.name=bound_eval")
        put("experiment.Ks", args.K and _csv(args.K))
        put("experiment.bs", args.b and _csv(args.b))
        put("simulation.add_reps", args.reps)
        put("experiment.window_rule", args.window_rule)
    elif c in ("arl", "add"):
        if args.b is not None:
            o.append("threshold.mode=fixed")
        put("threshold.b", args.b)
        put("threshold.gamma", args.gamma)
        put(f"simulation.{c}_reps", args.reps)
        put("simulation.max_steps", args.max_steps)
    elif c == "calibrate":
        put("threshold.gamma", args.gamma)
        put("threshold.rel_tol", args.rel_tol)
        put("simulation.arl_reps", args.reps)
    elif c == "experiment":
        put("experiment.name", args.name)
    elif c == "trace":
        put("simulation.steps", args.steps)
        put("scenario.nu", args.nu)
        if args.b is not None:
            o.append("threshold.mode=fixed")
        put("threshold.b", args.b)
    return o


def _experiment_args(cfg: ExperimentConfig):
    name = cfg["experiment.name"]
    fn = EXPERIMENTS[name]
    params = inspect.signature(fn).parameters
    kw = cfg.experiment_kwargs()
    kw["seed"] = cfg.seed
    if "workers" in params:
        kw["workers"] = cfg.workers
    if "add_reps" in params:
        kw["add_reps"] = cfg["simulation.add_reps"]
    if name == "bound_eval":
        kw["reps"] = cfg["simulation.add_reps"]
    if "max_steps" in params and cfg["simulation.max_steps"] is not None:
        kw["max_steps"] = cfg["simulation.max_steps"]
    if "book" in params:
        kw["book"] = ThresholdBook(cfg.threshold_mode("calibrated"), cfg["simulation.arl_reps"],
                                   cfg["threshold.rel_tol"], cfg.seed, cfg.workers)
    return fn, kw


def _run_experiment(cfg: ExperimentConfig) -> Table:
    fn, kw = _experiment_args(cfg)
    table = fn(**kw)
    table.meta.setdefault("experiment", cfg["experiment.name"])
    return table


def _resolve_threshold(cfg: ExperimentConfig, det, default_mode="log_gamma") -> float:
    pol = cfg.threshold_policy(default_mode)
    return pol.resolve(det, reps=cfg["simulation.arl_reps"], seed=cfg.seed, workers=cfg.workers) \
        if pol.mode == "calibrated" else pol.resolve(det)


def _run_arl(cfg: ExperimentConfig) -> Table:
    det = cfg.build_detector()
    b = _resolve_threshold(cfg, det)
    gamma = cfg["threshold.gamma"] if cfg.threshold_mode() != "fixed" else None
    r = estimate_arl(det, b, reps=cfg["simulation.arl_reps"], max_steps=cfg["simulation.max_steps"], gamma=gamma,
                     seed=cfg.seed, workers=cfg.workers)
    for w in r.warnings:
        log.warning("%s", w)
    t = Table(("b", "arl", "se", "censor_rate", "reps", "max_steps"), meta={"warnings": list(r.warnings)})
    t.add(b=r.b, arl=r.arl, se=r.se, censor_rate=r.censor_rate, reps=r.reps, max_steps=r.max_steps)
    return t


def _run_add(cfg: ExperimentConfig) -> Table:
    det = cfg.build_detector()
    scen, _ = cfg.build_scenario()
    b = _resolve_threshold(cfg, det)
    kw = {} if cfg["simulation.max_steps"] is None else {"max_steps": cfg["simulation.max_steps"]}
    r = estimate_add(det, scen, b, reps=cfg["simulation.add_reps"], seed=cfg.seed, workers=cfg.workers, **kw)
    for w in r.warnings:
        log.warning("%s", w)
    t = Table(("b", "add", "se", "censor_rate", "reps"), meta={"warnings": list(r.warnings)})
    t.add(b=r.b, add=r.add, se=r.se, censor_rate=r.censor_rate, reps=r.reps)
    return t


def _run_calibrate(cfg: ExperimentConfig) -> Table:
    det = cfg.build_detector()
    pol = cfg.threshold_policy("calibrated")
    if pol.mode == "log_gamma":
        rel_tol = 1.0
    else:
        rel_tol = pol.rel_tol
    (r,) = calibrate(det, [pol.value], reps=cfg["simulation.arl_reps"], rel_tol=rel_tol, bracket=pol.bracket,
                     seed=cfg.seed, workers=cfg.workers)
    t = Table(("gamma", "b", "arl", "se", "censor_rate", "reps"))
    t.add(gamma=r.gamma, b=r.b, arl=r.arl, se=r.se, censor_rate=r.censor_rate, reps=r.reps)
    return t


def _run_trace(cfg: ExperimentConfig) -> Table:
    det = cfg.build_detector()
    scen, _ = cfg.build_scenario()
    b = _resolve_threshold(cfg, det)
    X = ObservationStream(scen, replication_rng(cfg.seed, 0)).next_block(cfg["simulation.steps"])
    t = Table(("n", "statistic", "alarmed"), meta={"b": b, "nu": scen.nu})
    for n, s, a in trace(det, X, b):
        t.add(n=n, statistic=s, alarmed=a)
    return t


RUNNERS = {
    "mse": _run_experiment,
    "bound-eval": _run_experiment,
    "experiment": _run_experiment,
    "arl": _run_arl,
    "add": _run_add,
    "calibrate": _run_calibrate,
    "trace": _run_trace,
}


def _summary(command: str, table: Table) -> str:
    if command in ("arl", "add", "calibrate") and table.rows:
        return "  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in table.rows[0].items())
    if command == "trace":
        alarms = [r["n"] for r in table.rows if r["alarmed"]]
        return f"{len(table.rows)} steps, first alarm at n={alarms[0] if alarms else 'none'}"
    return f"{len(table.rows)} rows"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    validate_as = "experiment" if cmd in ("mse", "bound-eval") else cmd
    try:
        raw = load_raw(args.config) if args.config else {}
        raw = apply_overrides(raw, args.set + _flag_overrides(args))
        cfg = validate_config(raw, validate_as)
    except ConfigError as e:
        print(f"qcd-lab: configuration error: {e}", file=sys.stderr)
        return 1
    out = cfg["run.output"] or f"{cmd}.csv"
    start = time.perf_counter()
    try:
        with result_files(out, cfg.to_dict(), cfg.seed) as write:
            table = RUNNERS[cmd](cfg)
            write(table)
    except (InvalidParameter, BoundInapplicable) as e:
        print(f"qcd-lab: invalid parameter: {e}", file=sys.stderr)
        return 1
    except CalibrationFailed as e:
        print(f"qcd-lab: calibration failed: {e}", file=sys.stderr)
        for k, v in e.diagnostics.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report, do not dump a traceback at users
        log.debug("failure", exc_info=True)
        print(f"qcd-lab: {cmd} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(f"{cmd}: {_summary(cmd, table)} -> {out} ({time.perf_counter() - start:.1f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
