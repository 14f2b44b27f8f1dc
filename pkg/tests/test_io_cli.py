import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mnstm import cli, runner
from mnstm.io import (InputError, load_adjacency, load_count_panel, load_covariates, load_truth,
                      read_pi_trace, read_posterior_summary, save_adjacency, save_count_panel,
                      save_covariates, save_truth)
from mnstm.model import CountPanel
from mnstm.simulate import SimDesign, simulate_panel, smoothed_proportions


# ------------------------------------------------------------------- files

def test_empty_counts_file(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("")
    with pytest.raises(InputError, match="empty"):
        load_count_panel(p)


def test_single_cell_round_trip(tmp_path):
    panel = CountPanel(np.array([[[2]], [[3]]]), np.ones((1, 1), bool))
    save_count_panel(panel, tmp_path / "c.csv")
    back = load_count_panel(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.counts, panel.counts)


def test_generated_panel_round_trips(tmp_path):
    sim = simulate_panel(SimDesign("empirical_mnstm"), 3)
    save_count_panel(sim.panel, tmp_path / "c.csv")
    back = load_count_panel(tmp_path / "c.csv", n_units=30, n_times=10)
    np.testing.assert_array_equal(back.counts, sim.panel.counts)
    np.testing.assert_array_equal(back.observed, sim.panel.observed)


def test_total_mismatch_reports_line(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("k,i,t,y,m\n0,0,0,1,4\n1,0,0,2,4\n")
    with pytest.raises(InputError, match=r"c.csv:2"):
        load_count_panel(p)


def test_duplicate_key(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("k,i,t,y\n0,0,0,1\n0,0,0,2\n1,0,0,1\n")
    with pytest.raises(InputError, match="duplicate"):
        load_count_panel(p)


def test_missing_category(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("k,i,t,y\n0,0,0,1\n1,0,0,2\n0,1,0,3\n")
    with pytest.raises(InputError, match="categories"):
        load_count_panel(p)


def test_adjacency_examples(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("# nodes: 3\n")
    assert not load_adjacency(p).matrix.any()
    p.write_text("0 1\n")
    np.testing.assert_array_equal(load_adjacency(p).matrix, [[0, 1], [1, 0]])
    p.write_text("0 1\n1 2\n2 3\n")
    hand = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]])
    np.testing.assert_array_equal(load_adjacency(p).matrix, hand)


@pytest.mark.parametrize("text,msg", [("1 1\n", "self-loop"), ("0 5\n", "out of range"),
                                      ("0 x\n", "non-integer")])
def test_adjacency_errors(tmp_path, text, msg):
    p = tmp_path / "a.txt"
    p.write_text(text)
    with pytest.raises(InputError, match=msg):
        load_adjacency(p, n_nodes=3)


def test_adjacency_round_trip(tmp_path):
    sim = simulate_panel(SimDesign("empirical_mnstm"), 1)
    save_adjacency(sim.adjacency, tmp_path / "a.txt")
    np.testing.assert_array_equal(load_adjacency(tmp_path / "a.txt").matrix,
                                  sim.adjacency.matrix)


def test_covariates_and_truth_round_trip(tmp_path):
    sim = simulate_panel(SimDesign("appendix_b_static"), 2)
    save_covariates(sim.covariates, 50, tmp_path / "x.csv")
    X = load_covariates(tmp_path / "x.csv", 5, 50, 1)
    np.testing.assert_array_equal(X[0], sim.covariates[0])
    save_truth(sim.truth, sim.extras["totals"], tmp_path / "t.csv")
    pi, m = load_truth(tmp_path / "t.csv", 5, 50, 1)
    np.testing.assert_array_equal(pi, sim.truth)
    np.testing.assert_array_equal(m, sim.extras["totals"])


# -------------------------------------------------------------- simulation

def test_static_design_is_deterministic_and_calibrated():
    a = simulate_panel(SimDesign("appendix_b_static"), 7)
    b = simulate_panel(SimDesign("appendix_b_static"), 7)
    np.testing.assert_array_equal(a.panel.counts, b.panel.counts)
    assert a.panel.counts.shape == (5, 50, 1)
    assert a.basis.shape == (200, 125)
    # pooled category frequencies against the pooled truth
    m = a.panel.totals[:, 0]
    freq = a.panel.counts[:, :, 0].sum(axis=1) / m.sum()
    expected = (a.truth[:, :, 0] * m).sum(axis=1) / m.sum()
    se = np.sqrt(expected * (1 - expected) / m.sum())
    assert np.all(np.abs(freq - expected) < 4 * se)


def test_smoothing_map_examples():
    np.testing.assert_allclose(smoothed_proportions(np.zeros(3), 0), np.full(3, 1 / 3))
    sim = simulate_panel(SimDesign("empirical_mnstm"), 5)
    np.testing.assert_allclose(sim.truth.sum(axis=0), 1.0, atol=1e-12)
    assert sim.panel.observed.mean() == pytest.approx(0.65, abs=0.02)


def test_design_validation():
    with pytest.raises(ValueError):
        SimDesign("empirical_mnstm", observed_fraction=0.0)
    with pytest.raises(ValueError):
        SimDesign("other")


# --------------------------------------------------------------------- CLI

def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "mnstm", *args], capture_output=True,
                          text=True)


def test_help_exits_zero():
    for verb in ([], ["fit"], ["simulate"], ["diagnose"], ["validate-props"]):
        assert run_cli(*verb, "--help").returncode == 0


@pytest.fixture(scope="module")
def static_sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("static")
    assert cli.main(["simulate", "--design", "appendix_b_static", "--seed", "1",
                     "--out", str(out)]) == 0
    return out


def test_end_to_end_static(static_sim, tmp_path):
    out = tmp_path / "fit"
    code = cli.main(["fit", "--config", str(static_sim / "config.yaml"), "--iterations", "150",
                     "--out", str(out)])
    assert code == 0
    summary = read_posterior_summary(out / "posterior_summary.csv")
    assert summary["mean"].shape == (5, 50, 1)
    assert not np.isnan(summary["mean"]).any()
    np.testing.assert_allclose(summary["mean"].sum(axis=0), 1.0, atol=1e-12)
    diag = json.loads((out / "diagnostics.json").read_text())
    assert {"ess", "mrae", "coverage_95"} <= set(diag)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["model"] == "lmlb"
    assert set(manifest["inputs"]) == {"counts", "covariates", "truth"}
    pi, chains = read_pi_trace(out)
    assert pi.shape == (135, 5, 50, 1) and np.all(chains == 0)


def test_invalid_config_writes_nothing(static_sim, tmp_path):
    out = tmp_path / "bad"
    assert cli.main(["fit", "--config", str(static_sim / "config.yaml"), "--rho", "1.5",
                     "--out", str(out)]) == 1
    assert not out.exists()
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"counts": "x.csv", "banana": 3}))
    assert cli.main(["fit", "--config", str(cfg)]) == 1
    assert cli.main(["fit", "--counts", str(tmp_path / "missing.csv"),
                     "--out", str(out)]) == 1
    assert not out.exists()


def test_numerical_failure_exit_code(static_sim, tmp_path, monkeypatch):
    from mnstm.gibbs import SamplerDivergence

    def explode(*a, **k):
        raise SamplerDivergence(3, "non-finite state")
    monkeypatch.setattr(runner, "run_mnstm", explode)
    out = tmp_path / "fit"
    code = cli.main(["fit", "--config", str(static_sim / "config.yaml"), "--out", str(out)])
    assert code == 2
    assert not (out / "posterior_summary.csv").exists()


def test_descending_order_and_diagnose(tmp_path):
    sim_dir = tmp_path / "sim"
    assert cli.main(["simulate", "--seed", "4", "--out", str(sim_dir), "--n-times", "3"]) == 0
    out = tmp_path / "fit"
    assert cli.main(["fit", "--config", str(sim_dir / "config.yaml"), "--iterations", "120",
                     "--category-order", "descending", "--chains", "2",
                     "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    totals = load_count_panel(sim_dir / "counts.csv").counts.sum(axis=(1, 2))
    assert manifest["category_permutation"] == list(np.argsort(-totals, kind="stable"))
    before = json.loads((out / "diagnostics.json").read_text())
    assert cli.main(["diagnose", "--run-dir", str(out), "--truth",
                     str(sim_dir / "truth.csv")]) == 0
    after = json.loads((out / "diagnostics.json").read_text())
    assert after["mrae"] == before["mrae"]
    assert after["ess"] == before["ess"]


def test_config_paths_resolve_relative_to_file(static_sim):
    cfg = runner.RunConfig.from_file(static_sim / "config.yaml")
    assert cfg.counts == str(static_sim / "counts.csv")
    assert cfg.hyper == {"eps_scheme": "empirical_bayes"}


def test_thread_env(monkeypatch):
    monkeypatch.setenv(runner.THREADS_ENV, "3")
    assert runner.default_workers() == 3
    monkeypatch.setenv(runner.THREADS_ENV, "many")
    with pytest.raises(InputError):
        runner.default_workers()
