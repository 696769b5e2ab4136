import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gnssfg.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUN_ERROR, main
from gnssfg.errors import ConfigError
from gnssfg.graph import epoch_key, linearize
from gnssfg.runner import (
    COMPARE_FIELDS,
    EstimatorSpec,
    KernelSpec,
    RunConfig,
    compare,
    estimate_scenario,
    format_table,
    load_config,
    load_config_text,
    run,
)
from gnssfg.sim import OutlierModel, ScenarioConfig, generate, read_scenario, to_graph, write_scenario

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def cfg(estimator="batch", kernel="l2", scenario=None, **kw):
    scenario = scenario or ScenarioConfig(n_epochs=20, rng_seed=4)
    est = EstimatorSpec(**estimator) if isinstance(estimator, dict) else EstimatorSpec(estimator)
    return RunConfig(scenario=scenario, estimator=est, kernel=KernelSpec(kernel), **kw)


def test_identical_config_gives_identical_report():
    c = cfg(kernel="dcs", scenario=ScenarioConfig(n_epochs=15, outlier=OutlierModel(0.2), rng_seed=2))
    a, b = run(c, write=False), run(c, write=False)
    assert a == b
    assert a.wall_time >= 0


def test_report_invariants():
    sc = ScenarioConfig(n_epochs=20, outlier=OutlierModel(0.2), rng_seed=6)
    for kernel in ("l2", "huber", "switch", "gnc"):
        rep = run(cfg(kernel=kernel, scenario=sc), write=False)
        assert rep.position_rmse >= 0 and rep.horizontal_rmse >= 0 and rep.clock_rmse >= 0
        assert len(rep.per_epoch_position_error) == 20
        for v in (rep.outlier_precision, rep.outlier_recall):
            assert v is None or 0.0 <= v <= 1.0
        if kernel == "l2":
            assert rep.outlier_precision is None


@pytest.mark.parametrize("seed", range(5))
def test_fixed_lag_covering_everything_matches_batch(seed):
    sc = ScenarioConfig(n_epochs=12, rng_seed=seed)
    scenario = generate(sc)
    c = cfg("batch", scenario=sc)
    batch, *_ = estimate_scenario(c, scenario)
    lagged, *_ = estimate_scenario(cfg({"type": "fixed_lag", "lag": 12}, scenario=sc), scenario)
    # same graph, so the same optimum; LM accepts only strict cost decreases, so
    # both stop where the cost is flat to one ulp: compare in the information metric
    graph, _ = to_graph(scenario, c.estimator_config())
    system = linearize(graph, batch)
    J = system.jacobian().toarray()
    d = np.zeros(J.shape[1])
    for key, sl in system.column_index.items():
        d[sl] = lagged[key].to_vector() - batch[key].to_vector()
    mahal = float(d @ (J.T @ (J @ d)))
    pos = max(float(np.linalg.norm(lagged[epoch_key(k)].position - batch[epoch_key(k)].position))
              for k in range(12))
    print(f"seed {seed}: d'Hd {mahal:.2e}, max position gap {pos:.2e} m")
    assert mahal < 1e-10
    assert pos < 1e-6


def test_ekf_and_batch_agree_on_clean_scenario():
    sc = ScenarioConfig(n_epochs=20, pseudorange_sigma=0.0, clock_walk_sigma=0.0, tropo_walk_sigma=0.0,
                        rng_seed=1)
    model = {"init_position_sigma": 0.0, "init_clock_sigma": 0.0, "init_tropo_sigma": 0.0}
    rows = compare([cfg("ekf", scenario=sc, model=model), cfg("batch", scenario=sc, model=model)])
    ekf, batch = rows
    scenario = generate(sc)
    a, *_ = estimate_scenario(cfg("ekf", scenario=sc, model=model), scenario)
    b, *_ = estimate_scenario(cfg("batch", scenario=sc, model=model), scenario)
    last = epoch_key(19)
    gap = float(np.linalg.norm(a[last].to_vector() - b[last].to_vector()))
    print(f"EKF vs batch final-epoch state gap: {gap:.3e}")
    assert gap < 1e-6
    assert abs(ekf["final_epoch_position_error"] - batch["final_epoch_position_error"]) < 1e-6


def test_gnc_beats_least_squares_with_outliers():
    sc = ScenarioConfig(n_epochs=40, outlier=OutlierModel(0.2), rng_seed=11)
    l2, gnc = compare([cfg("batch", "l2", scenario=sc), cfg("batch", "gnc", scenario=sc)])
    print(f"horizontal RMSE: L2 {l2['horizontal_rmse']:.3f} m, GNC {gnc['horizontal_rmse']:.3f} m")
    assert gnc["horizontal_rmse"] < l2["horizontal_rmse"]


def test_compare_needs_two_configs_on_one_scenario():
    with pytest.raises(ConfigError):
        compare([])
    with pytest.raises(ConfigError):
        compare([cfg()])
    with pytest.raises(ConfigError):
        compare([cfg(scenario=ScenarioConfig(rng_seed=1)), cfg(scenario=ScenarioConfig(rng_seed=2))])


def test_table_header_and_field_order():
    sc = ScenarioConfig(n_epochs=8, rng_seed=2)
    rows = compare([cfg("ekf", scenario=sc), cfg("batch", "huber", scenario=sc)])
    lines = format_table(rows).splitlines()
    assert lines[0].split(",") == COMPARE_FIELDS
    assert len(lines) == 3
    assert [r["kernel"] for r in rows] == ["l2", "huber"]


def test_run_config_needs_exactly_one_scenario_source():
    with pytest.raises(ConfigError):
        RunConfig()
    with pytest.raises(ConfigError):
        RunConfig(scenario=ScenarioConfig(), scenario_path="x")


def test_unknown_key_reports_line():
    text = "scenario:\n  n_epochs: 5\nestimator:\n  type: batch\n  lagg: 3\n"
    with pytest.raises(ConfigError, match=r"cfg.yaml:5: estimator.lagg: unknown key"):
        load_config_text(text, "cfg.yaml")


@pytest.mark.parametrize("text,match", [
    ("scenario: {n_epochs: 0}\n", "n_epochs"),
    ("scenario: {}\nestimator: {type: smoother}\n", "estimator.type"),
    ("scenario: {}\nkernel: {type: huber, phi: 2}\n", "kernel.phi"),
    ("scenario: {}\nkernel: {type: huber, delta: -1}\n", "kernel"),
    ("scenario: {}\nsolver: {max_iterations: 0}\n", "solver"),
    ("scenario: {}\nseed: abc\n", "seed"),
    ("estimator: {type: batch}\n", "exactly one"),
    ("scenario: [1, 2\n", "cfg"),
    ("- 1\n- 2\n", "top level"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        load_config_text(text, "cfg")


def test_compare_document_shares_scenario_and_seed():
    runs, out = load_config(CONFIGS / "compare.yaml")
    assert out == "out/compare"
    assert len(runs) >= 2
    assert len({r.scenario_source() for r in runs}) == 1
    assert all(r.seed == 3 for r in runs)


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.yaml")):
        runs, _ = load_config(path)
        assert runs


def test_kernel_ignored_for_filters(caplog):
    sc = ScenarioConfig(n_epochs=5, rng_seed=1)
    with caplog.at_level("WARNING"):
        rep = run(cfg("ekf", "dcs", scenario=sc), write=False)
    assert "ignored" in caplog.text
    assert rep.kernel == "l2"


def test_run_from_scenario_files(tmp_path):
    sc = ScenarioConfig(n_epochs=10, outlier=OutlierModel(0.1), rng_seed=5)
    write_scenario(generate(sc), tmp_path / "scenario")
    from_files = RunConfig(scenario_path=str(tmp_path / "scenario"), kernel=KernelSpec("dcs"), seed=0)
    inline = RunConfig(scenario=sc, kernel=KernelSpec("dcs"), model={"init_seed": 0})
    a, b = run(from_files, write=False), run(inline, write=False)
    assert a.per_epoch_position_error == b.per_epoch_position_error


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_main_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, "good.yaml", "scenario: {n_epochs: 5}\nkernel: huber\n")
    assert main(["run", "--config", good, "--output", str(tmp_path / "o")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["command"] == "run"

    bad = _write(tmp_path, "bad.yaml", "scenario: {n_epochs: 5}\nbogus: 1\n")
    assert main(["run", "--config", bad, "--output", str(tmp_path / "o2")]) == EXIT_CONFIG_ERROR
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "bad.yaml:2" in err["message"]
    assert not (tmp_path / "o2").exists()

    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--output", "x"]) == EXIT_CONFIG_ERROR
    capsys.readouterr()

    infeasible = _write(tmp_path, "geo.yaml",
                        "scenario: {n_epochs: 2, n_satellites: 4, elevation_range_deg: [40, 40]}\n")
    assert main(["run", "--config", infeasible, "--output", str(tmp_path / "o3")]) == EXIT_RUN_ERROR
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "GeometryError" and err["message"].startswith("run failed")


def test_no_output_path_is_a_config_error(tmp_path, capsys):
    path = _write(tmp_path, "c.yaml", "scenario: {n_epochs: 3}\n")
    assert main(["run", "--config", path]) == EXIT_CONFIG_ERROR
    assert "output" in json.loads(capsys.readouterr().err)["message"]


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "gnssfg.cli", *args], cwd=cwd,
                          capture_output=True, text=True, timeout=300)


def test_subprocess_generate_run_compare(tmp_path):
    scen = _write(tmp_path, "scenario.yaml",
                  "output: gen\nscenario: {n_epochs: 8, outlier: {probability: 0.2}, rng_seed: 1}\n")
    r = _cli("generate", "--config", scen, "--seed", "9", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    with open(tmp_path / "gen" / "truth.csv") as fh:
        assert len(list(csv.reader(fh))) == 9
    # --seed overrides the configured rng_seed and the files round-trip exactly
    assert json.loads((tmp_path / "gen" / "scenario.json").read_text())["rng_seed"] == 9
    back = read_scenario(tmp_path / "gen")
    fresh = generate(ScenarioConfig(n_epochs=8, outlier=OutlierModel(0.2), rng_seed=9))
    assert back.outlier_labels == fresh.outlier_labels
    assert [o.pseudorange for o in back.observations[3]] == [o.pseudorange for o in fresh.observations[3]]

    run_cfg = _write(tmp_path, "run.yaml", "scenario_path: gen\nestimator: {type: fixed_lag, lag: 3}\n"
                                           "kernel: {type: dcs, phi: 9.0}\n")
    r = _cli("run", "--config", run_cfg, "--seed", "2", "--output", str(tmp_path / "res"), cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    metrics = json.loads((tmp_path / "res" / "metrics.json").read_text())
    assert metrics["estimator"] == "fixed_lag(3)" and metrics["n_epochs"] == 8
    with open(tmp_path / "res" / "estimates.csv") as fh:
        est = list(csv.DictReader(fh))
    assert len(est) == 8 and list(est[0]) == ["epoch", "x", "y", "z", "clock", "tropo", "position_error"]

    r = _cli("compare", "--config", str(CONFIGS / "compare.yaml"), "--output", str(tmp_path / "cmp"),
             "--seed", "4", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    table = (tmp_path / "cmp" / "comparison.csv").read_text()
    assert table == r.stdout
    assert table.splitlines()[0].split(",") == COMPARE_FIELDS
    rows = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert [row["name"] for row in rows][:3] == ["ekf", "iekf", "batch-l2"]


def test_seed_override_changes_only_randomness(tmp_path):
    path = _write(tmp_path, "c.yaml", "seed: 1\nscenario: {n_epochs: 6}\n")
    outs = []
    for seed in ("1", "1", "2"):
        out = tmp_path / f"o{len(outs)}"
        assert main(["run", "--config", path, "--seed", seed, "--output", str(out)]) == EXIT_OK
        outs.append((out / "estimates.csv").read_text())
    assert outs[0] == outs[1]
    assert outs[0] != outs[2]
