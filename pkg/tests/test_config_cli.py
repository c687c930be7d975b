import json
from pathlib import Path

import pytest

from qcd_lab.cli import main
from qcd_lab.config import apply_overrides, load_raw, validate_config
from qcd_lab.detectors import ParallelWLCuSum
from qcd_lab.errors import ConfigError
from qcd_lab.output import read_csv, sidecar_path


def cfg_of(**sections):
    return validate_config({s: {k: str(v) for k, v in d.items()} for s, d in sections.items()})


def test_defaults_build_parallel_js_plus():
    det = cfg_of().build_detector()
    assert isinstance(det, ParallelWLCuSum)
    assert det.max_window == 200
    assert det.estimator.kind == "js_global_mean" and det.estimator.positive_part


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError) as exc:
        validate_config({"detector": {"windw": "5"}})
    assert exc.value.key == "detector.windw"
    with pytest.raises(ConfigError):
        validate_config({"detectr": {}})


def test_bad_value_names_the_key():
    with pytest.raises(ConfigError) as exc:
        validate_config({"scenario": {"K": "ten"}})
    assert exc.value.key == "scenario.K"


def test_js_point_needs_three_streams():
    with pytest.raises(ConfigError, match="K >= 3"):
        cfg_of(scenario=dict(K=2), detector=dict(kind="wl_cusum", estimator="js_point"))


def test_subspace_dimension_rejected_up_front():
    with pytest.raises(ConfigError, match="< K - 2"):
        cfg_of(scenario=dict(type="spatial", K=4), detector=dict(estimator="js_subspace", target="spatial"))
    with pytest.raises(ConfigError, match="d < K - 2"):
        cfg_of(scenario=dict(type="equal", K=3), detector=dict(estimator="js_subspace", target="theta"))
    cfg_of(scenario=dict(type="spatial", K=5), detector=dict(estimator="js_subspace", target="spatial"))


def test_experiment_rejects_foreign_keys():
    with pytest.raises(ConfigError) as exc:
        validate_config({"experiment": {"name": "mse_curves", "rs": "1,2"}}, "experiment")
    assert exc.value.key == "experiment.rs"


def test_overrides_and_ranges(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nname = sparse_sweep\nks = 1..4, 8\n[run]\nseed = 3\n")
    raw = apply_overrides(load_raw(p), ["run.seed=9"])
    cfg = validate_config(raw, "experiment")
    assert cfg.seed == 9 and cfg["experiment.ks"] == (1, 2, 3, 4, 8)
    with pytest.raises(ConfigError):
        apply_overrides({}, ["seed=3"])


def test_missing_config_file_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["arl", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["arl", "--set", "detector.bogus=1", "--out", str(tmp_path / "a.csv")]) == 1
    assert "detector.bogus" in capsys.readouterr().err


def test_calibration_failure_exit_code(tmp_path, capsys):
    args = ["calibrate", "--gamma", "50", "--reps", "50", "--set", "threshold.bracket=5,6",
            "--set", "detector.kind=wl_cusum", "--out", str(tmp_path / "c.csv")]
    assert main(args) == 2
    err = capsys.readouterr().err
    assert "calibration failed" in err and "gamma" in err
    assert json.loads(sidecar_path(tmp_path / "c.csv").read_text())["status"] == "failed"


SMALL = ["--set", "scenario.K=5", "--set", "detector.max_window=10"]


@pytest.mark.parametrize("argv", [
    ["mse", "--K", "5", "--reps", "2000", "--theta-norms", "0", "1"],
    ["bound-eval", "--K", "10", "--b", "3", "--reps", "50", "--set", "experiment.mse_reps=500"],
    ["arl", "--b", "2", "--reps", "30", *SMALL],
    ["arl", "--gamma", "30", "--reps", "30", *SMALL],
    ["add", "--gamma", "30", "--reps", "30", *SMALL],
    ["calibrate", "--gamma", "30", "--reps", "100", *SMALL],
    ["trace", "--steps", "40", "--nu", "20", "--b", "3", *SMALL],
    ["experiment", "--name", "sparse_sweep", "--set", "experiment.K=6", "--set", "experiment.ks=1,6",
     "--set", "experiment.tests=glr,js-wl", "--set", "experiment.gamma=30", "--set", "simulation.add_reps=20",
     "--set", "simulation.arl_reps=100", "--set", "experiment.max_window=10"],
])
def test_every_command_runs(argv, tmp_path, capsys):
    out = tmp_path / "out.csv"
    assert main(argv + ["--out", str(out), "--seed", "4"]) == 0
    assert read_csv(out)
    meta = json.loads(sidecar_path(out).read_text())
    assert meta["status"] == "complete" and meta["seed"] == 4
    assert argv[0] in capsys.readouterr().out


def test_trace_alarms_after_the_change(tmp_path):
    out = tmp_path / "t.csv"
    main(["trace", "--steps", "300", "--nu", "150", "--b", "8", "--out", str(out), *SMALL])
    rows = read_csv(out)
    first = min(int(r["n"]) for r in rows if r["alarmed"] == "1")
    assert first > 150


def test_seed_makes_runs_repeatable(tmp_path):
    base = ["add", "--gamma", "30", "--reps", "40", *SMALL]
    main(base + ["--seed", "7", "--out", str(tmp_path / "a.csv")])
    main(base + ["--seed", "7", "--out", str(tmp_path / "b.csv")])
    main(base + ["--seed", "8", "--out", str(tmp_path / "c.csv")])
    a, b, c = ((tmp_path / f"{x}.csv").read_bytes() for x in "abc")
    assert a == b and a != c


def test_experiment_from_config_file(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\nname = mse_curves\nK = 6\nreps = 3000\ntheta_norms = 0, 2\n"
                   "[run]\nseed = 1\n")
    out = tmp_path / "m.csv"
    assert main(["experiment", "--config", str(ini), "--seed", "7", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [float(r["theta_norm"]) for r in rows] == [0.0, 2.0]
    assert json.loads(sidecar_path(out).read_text())["config"]["run"]["seed"] == 7


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    command = "experiment" if "experiment" in load_raw(path) else "add"
    validate_config(load_raw(path), command)
