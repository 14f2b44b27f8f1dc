"""End-to-end acceptance checks at full tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see each PASS/FAIL line as it
happens; the lines are also repeated in the terminal summary.
"""
import json
import time

import numpy as np
import pytest

from mnstm import cli, validation

pytestmark = pytest.mark.slow


def _battery(report, number, title, result, budget):
    ok = result["passed"] and result["seconds"] < budget
    report(number, title, ok, f"metric={result['metric']:.3g} (tolerance {result['tolerance']:.3g}),"
           f" {result['seconds']:.1f}s of {budget}s")
    assert result["passed"], result
    assert result["seconds"] < budget


def test_01_marginal_sampling(report):
    _battery(report, 1, "marginal sampling KS", validation.marginal_sampling_ks(), 60)


def test_02_stick_breaking(report):
    _battery(report, 2, "stick-breaking factorization",
             validation.stick_breaking_factorization(), 1)


def test_03_propagator_stability(report):
    res = validation.propagator_stability()
    _battery(report, 3, "propagator stability", res, 1)
    assert res["worst_term_error"] <= 1e-12


def test_04_precision_factor(report):
    res = validation.precision_factor_checks()
    _battery(report, 4, "precision factor", res, 5)
    assert res["n_better_perturbations"] == 0


def test_05_polya_gamma(report):
    _battery(report, 5, "Polya-Gamma identity", validation.polya_gamma_identity(), 120)


def test_06_conjugacy(report):
    _battery(report, 6, "conjugacy oracles", validation.conjugacy_oracles(), 30)


def _fit(sim_dir, out, *extra):
    start = time.perf_counter()
    code = cli.main(["fit", "--config", str(sim_dir / "config.yaml"), "--out", str(out), *extra])
    assert code == 0
    return json.loads((out / "diagnostics.json").read_text()), time.perf_counter() - start


def test_07_static_coverage(tmp_path, report):
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--design", "appendix_b_static", "--seed", "0",
                     "--out", str(sim)]) == 0
    diag, seconds = _fit(sim, tmp_path / "fit", "--iterations", "2000")
    cov = diag["coverage_95"]
    ok = cov >= 0.85 and seconds < 15 * 60
    report(7, "static design 95% coverage", ok, f"coverage={cov:.3f} (>= 0.85), {seconds:.0f}s")
    assert cov >= 0.85
    assert seconds < 15 * 60


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    sim = root / "sim"
    assert cli.main(["simulate", "--design", "empirical_mnstm", "--seed", "1",
                     "--out", str(sim)]) == 0
    # 1112 iterations with 112 burn-in leaves exactly 1000 retained draws
    return _fit(sim, root / "fit", "--iterations", "1112", "--burn-in", "112")


def test_08_desk_mrae(desk_run, report):
    diag, seconds = desk_run
    mrae = diag["mrae"]["median"]
    ok = mrae < 0.8 and seconds < 30 * 60
    report(8, "spatio-temporal MRAE", ok, f"MRAE={mrae:.3f} (< 0.8), {seconds:.0f}s")
    assert mrae < 0.8
    assert seconds < 30 * 60


def test_09_desk_ess(desk_run, report):
    diag, _ = desk_run
    B = diag["n_draws"]
    med = diag["ess"]["median"]
    ok = B == 1000 and med > 0.3 * B
    report(9, "median ESS", ok, f"median ESS={med:.0f} of B={B} (> {0.3 * B:.0f})")
    assert B == 1000
    assert med > 0.3 * B


def test_10_shape_log_concavity(report):
    _battery(report, 10, "shape-kernel log-concavity", validation.shape_log_concavity(), 60)


def test_11_beta_binomial(report):
    res = validation.beta_binomial_exactness()
    _battery(report, 11, "beta-binomial exactness", res, 60)


def test_12_determinism(tmp_path, report):
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--seed", "9", "--out", str(sim)]) == 0
    outs = [tmp_path / f"fit{j}" for j in range(2)]
    for out in outs:
        _fit(sim, out, "--iterations", "300", "--chains", "2")
    a, b = ((o / "posterior_summary.csv").read_bytes() for o in outs)
    manifests = [json.loads((o / "manifest.json").read_text()) for o in outs]
    for m in manifests:
        m["config"].pop("out")
    same_manifest = manifests[0] == manifests[1]
    ok = a == b and same_manifest
    report(12, "determinism", ok, f"summaries identical={a == b}, {len(a)} bytes")
    assert same_manifest
    assert a == b
