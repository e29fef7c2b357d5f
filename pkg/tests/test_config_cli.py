from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from ctdsg import cli
from ctdsg.analysis import fit_rate
from ctdsg.config import apply_overrides, build, config_hash, load, load_raw
from ctdsg.errors import ConfigError
from ctdsg.ensemble import run_ensemble

ROOT = Path(__file__).resolve().parents[1]


def raw_preset(**overrides) -> dict:
    return apply_overrides(load_raw("reference"), **overrides)


def write_yaml(path: Path, raw: dict) -> Path:
    path.write_text(yaml.safe_dump(raw))
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_cli(*args) -> int:
    return cli.run([*map(str, args), "--no-plots"])


# --- config ------------------------------------------------------------------------

def test_shipped_config_matches_preset():
    shipped = yaml.safe_load((ROOT / "configs" / "reference.yaml").read_text())
    assert config_hash(shipped) == config_hash(load_raw("reference"))


def test_preset_builds_reference_experiment():
    exp = load("reference")
    assert exp.sim.n == 6 and exp.sim.m == 2
    assert exp.sim.h == 1e-3 and exp.sim.horizon == 30.0
    assert exp.runs == 200 and exp.connectivity == (0.01, 0.04)
    np.testing.assert_allclose(exp.sim.objectives.minimizer(), [1.5, 27 / 14])
    np.testing.assert_allclose(exp.sim.x0.mean(axis=0), [0.8, 11.6 / 6])


def test_preset_edges_match_default_schedule():
    from ctdsg.graph import default_schedule

    exp = load("reference")
    for (d1, g1), (d2, g2) in zip(exp.sim.schedule.segments, default_schedule().segments):
        assert d1 == d2
        np.testing.assert_array_equal(g1.weights, g2.weights)


def test_rejects_h_not_dividing_segments():
    with pytest.raises(ConfigError) as info:
        build(raw_preset(h=0.003))
    assert info.value.field == "dynamics.h"


def test_rejects_unbalanced_graph_with_connectivity_declared():
    raw = raw_preset()
    raw["graph"]["segments"][0]["edges"].append([1, 3, 1.0])
    with pytest.raises(ConfigError) as info:
        build(raw)
    assert info.value.field == "graph"


def test_rejects_disconnected_schedule_with_connectivity_declared():
    raw = raw_preset()
    # keep every subgraph balanced but cut agents 4..6 off from 1..3
    tri = [[1, 2, 1.0], [2, 3, 1.0], [3, 1, 1.0], [4, 5, 1.0], [5, 6, 1.0], [6, 4, 1.0]]
    for seg in raw["graph"]["segments"]:
        seg["edges"] = tri
    with pytest.raises(ConfigError) as info:
        build(raw)
    assert info.value.field == "graph.connectivity"


@pytest.mark.parametrize("a", [0.5, 0.3, 1.2])
def test_rejects_a_outside_range(a):
    with pytest.raises(ConfigError) as info:
        build(raw_preset(a=a))
    assert info.value.field == "dynamics.a"


def test_rejects_bad_sweep_value():
    with pytest.raises(ConfigError) as info:
        build(raw_preset(a_values=[0.6, 0.5]))
    assert info.value.field == "experiment.a_values"


def test_rejects_edge_labels_out_of_range():
    raw = raw_preset()
    raw["graph"]["segments"][1]["edges"][0] = [0, 2, 1.0]
    with pytest.raises(ConfigError) as info:
        build(raw)
    assert info.value.field == "graph.segments[1].edges"


def test_rejects_unknown_experiment():
    with pytest.raises(ConfigError):
        build(raw_preset(experiment="plot-everything"))


def test_hash_ignores_output_dir_and_workers():
    assert config_hash(raw_preset(out="a", workers=1)) == config_hash(raw_preset(out="b", workers=8))
    assert config_hash(raw_preset(seed=1)) != config_hash(raw_preset(seed=2))


def test_explicit_quadratics_and_constant_noise():
    raw = raw_preset()
    raw["objectives"] = {"quadratics": [{"P": [[1.0, 0.0], [0.0, 2.0]], "q": [0.0, -1.0]}] * 6}
    raw["dynamics"]["noise"] = {"kind": "constant", "vector": [0.1, 0.2]}
    exp = build(raw)
    np.testing.assert_allclose(exp.sim.objectives.minimizer(), [0.0, 0.5])
    assert exp.sim.noise.K(6, 2) == pytest.approx(np.hypot(0.1, 0.2))


# --- CLI ---------------------------------------------------------------------------

def test_config_error_exit_code(tmp_path):
    out = tmp_path / "never"
    assert run_cli("--config", "reference", "--a", 0.5, "--out", out) == cli.EXIT_CONFIG
    assert not out.exists()
    assert run_cli("--config", tmp_path / "missing.yaml", "--out", out) == cli.EXIT_CONFIG
    assert run_cli("--config", "reference", "--a-values", "0.6,0.5", "--experiment", "sweep",
                   "--out", out) == cli.EXIT_CONFIG
    assert not out.exists()


def test_single_deterministic_run(tmp_path):
    code = run_cli("--config", "reference", "--runs", 1, "--noise-scale", 0, "--horizon", 1, "--out", tmp_path)
    assert code == cli.EXIT_OK
    rows = read_csv(tmp_path / "stats.csv")
    assert len(rows) == 11 * 6
    for col in ("se_coord_1", "se_coord_2", "se_gap"):
        assert all(float(r[col]) == 0.0 for r in rows)


def test_same_seed_twice_gives_identical_csv(tmp_path):
    for d in ("a", "b"):
        assert run_cli("--config", "reference", "--seed", 7, "--runs", 8, "--horizon", 1,
                       "--out", tmp_path / d) == cli.EXIT_OK
    assert (tmp_path / "a" / "stats.csv").read_bytes() == (tmp_path / "b" / "stats.csv").read_bytes()
    run_cli("--config", "reference", "--seed", 8, "--runs", 8, "--horizon", 1, "--out", tmp_path / "c")
    assert (tmp_path / "a" / "stats.csv").read_bytes() != (tmp_path / "c" / "stats.csv").read_bytes()


def test_manifest_contents(tmp_path):
    run_cli("--config", "reference", "--runs", 4, "--horizon", 0.5, "--seed", 11, "--out", tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["manifest_version"] == 1
    assert man["seed"] == 11 and man["exit_status"] == 0 and man["experiment"] == "simulate"
    assert set(man["versions"]) >= {"ctdsg", "python", "numpy", "scipy"}
    assert man["config_sha256"] == config_hash(man["config"])
    assert set(man["outputs"]) == {"stats.csv"}
    assert (tmp_path / "report.txt").exists()


def test_manifest_replay_with_other_worker_count(tmp_path):
    first = tmp_path / "first"
    run_cli("--config", "reference", "--runs", 110, "--horizon", 0.5, "--workers", 1, "--out", first)
    again = tmp_path / "again"
    assert run_cli("--config", first / "manifest.json", "--workers", 3, "--out", again) == cli.EXIT_OK
    assert (first / "stats.csv").read_bytes() == (again / "stats.csv").read_bytes()
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((again / "manifest.json").read_text())
    assert m1["config_sha256"] == m2["config_sha256"]
    assert m1["outputs"] == m2["outputs"]


def test_json_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw_preset(runs=2, horizon=0.2)))
    assert run_cli("--config", path, "--out", tmp_path / "o") == cli.EXIT_OK


def test_sweep_single_value_equals_run_plus_fit(tmp_path):
    code = run_cli("--config", "reference", "--experiment", "sweep", "--a-values", "0.8", "--runs", 6,
                   "--horizon", 5, "--out", tmp_path)
    assert code == cli.EXIT_OK
    exp = load("reference", runs=6, horizon=5.0, a=0.8)
    stats = run_ensemble(exp.sim, 6)
    direct = tmp_path / "direct.csv"
    stats.to_csv(direct)
    assert (tmp_path / "stats_a0.8.csv").read_bytes() == direct.read_bytes()
    (row,) = read_csv(tmp_path / "comparison.csv")
    fit = fit_rate(stats, 0.8)
    assert float(row["a"]) == 0.8
    assert float(row["fitted_exponent"]) == fit.exponent
    assert float(row["predicted_exponent"]) == pytest.approx(0.2)
    assert float(row["final_gap"]) == float(stats.mean_gap[-1].mean())


def test_sweep_table_has_one_row_per_value(tmp_path):
    code = run_cli("--config", "reference", "--experiment", "sweep", "--runs", 3, "--horizon", 3, "--out", tmp_path)
    assert code == cli.EXIT_OK
    rows = read_csv(tmp_path / "comparison.csv")
    assert [float(r["a"]) for r in rows] == [0.6, 0.75, 0.95]
    assert [r["model"] for r in rows] == ["power", "log-power", "power"]


def test_consensus_only(tmp_path):
    assert run_cli("--config", "reference", "--experiment", "consensus-only", "--horizon", 20,
                   "--out", tmp_path) == cli.EXIT_OK
    rows = read_csv(tmp_path / "trajectory.csv")
    last = [r for r in rows if float(r["t"]) == 20.0]
    assert len(last) == 6
    for r in last:
        assert abs(float(r["coord_1"]) - 0.8) <= 1e-6
        assert abs(float(r["coord_2"]) - 11.6 / 6) <= 1e-6


def test_isometry_experiment(tmp_path):
    code = run_cli("--config", "reference", "--experiment", "isometry", "--runs", 10000, "--horizon", 5,
                   "--out", tmp_path)
    assert code == cli.EXIT_OK
    (row,) = read_csv(tmp_path / "isometry.csv")
    assert float(row["rhs"]) == pytest.approx(5.0, rel=1e-10)


def test_certify_noise_free_consensus_passes(tmp_path):
    raw = raw_preset(runs=2, horizon=5.0, noise_scale=0.0, experiment="certify-bounds")
    raw["dynamics"]["zero_gradient"] = True
    code = run_cli("--config", write_yaml(tmp_path / "c.yaml", raw), "--out", tmp_path / "o")
    assert code == cli.EXIT_OK
    rows = read_csv(tmp_path / "o" / "bounds.csv")
    claims = {r["claim"].split("[")[0] for r in rows}
    assert claims == {"geometric-decay", "integral-bound", "consensus-bound"}
    assert all(float(r["violation"]) <= 0 for r in rows if r["claim"] != "consensus-bound")


def test_certify_failed_rate_check_exits_2(tmp_path):
    # two seconds are far too short for the asymptotic rate, so the check fails
    code = run_cli("--config", "reference", "--experiment", "certify-bounds", "--runs", 4, "--horizon", 2,
                   "--out", tmp_path)
    assert code == cli.EXIT_FAILED
    report = (tmp_path / "report.txt").read_text()
    assert "FAIL  rate" in report
    assert json.loads((tmp_path / "manifest.json").read_text())["exit_status"] == cli.EXIT_FAILED


def test_divergence_exit_code(tmp_path):
    code = run_cli("--config", "reference", "--beta", 1e5, "--runs", 4, "--horizon", 0.1, "--out", tmp_path)
    assert code == cli.EXIT_DIVERGED
    assert "FAIL" in (tmp_path / "report.txt").read_text()


def test_figures_written(tmp_path):
    pytest.importorskip("matplotlib")
    code = cli.run(["--config", "reference", "--runs", "2", "--horizon", "0.5", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    assert (tmp_path / "states.png").stat().st_size > 0
    assert (tmp_path / "gaps.png").stat().st_size > 0


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ctdsg.cli", "--config", "reference", "--runs", "2",
                           "--horizon", "0.2", "--no-plots", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "agent 6" in proc.stdout
