import numpy as np
import pytest

from mnstm.diagnostics import (coverage_report, effective_sample_size,
                               effective_sample_size_batch, ess_report,
                               median_relative_absolute_error, summarize_draws)


def ar1(n, phi, rng):
    x = np.empty(n)
    x[0] = rng.normal() / np.sqrt(1 - phi ** 2)
    e = rng.normal(size=n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


def test_iid_trace(rng):
    B = 10_000
    assert 0.8 * B <= effective_sample_size(rng.normal(size=B)) <= 1.2 * B


def test_ar1_trace(rng):
    B = 100_000
    expected = B * 0.1 / 1.9
    assert effective_sample_size(ar1(B, 0.9, rng)) == pytest.approx(expected, rel=0.3)


def test_batch_estimator_on_ar1(rng):
    B = 100_000
    expected = B * 0.1 / 1.9
    assert effective_sample_size_batch(ar1(B, 0.9, rng)) == pytest.approx(expected, rel=0.3)


def test_affine_invariance(rng):
    x = ar1(5000, 0.5, rng)
    assert effective_sample_size(3.0 * x - 7.0) == pytest.approx(effective_sample_size(x),
                                                                 rel=1e-10)


def test_constant_trace_flagged():
    rep = ess_report(np.ones((50, 2)))
    assert rep.median == 50 and rep.degenerate.all()


def test_short_trace_rejected():
    with pytest.raises(ValueError):
        effective_sample_size(np.arange(5.0))


def test_report_estimators(rng):
    X = rng.normal(size=(2000, 3))
    for est in ("autocorrelation", "batch"):
        rep = ess_report(X, est)
        assert rep.values.shape == (3,) and np.all(rep.values > 0)
    with pytest.raises(ValueError):
        ess_report(X, "spectral")


def test_mrae_exact_estimate_is_zero(rng):
    truth = rng.dirichlet(np.ones(3), size=(4, 2)).transpose(2, 0, 1)
    assert median_relative_absolute_error(truth, 10, truth).median == 0.0


def test_mrae_closed_form_shift():
    truth = np.array([0.2, 0.5, 0.7])
    m = 10.0
    rep = median_relative_absolute_error(truth, m, truth + 1 / m)
    per_cell = 1 / (m * truth * (1 - truth))
    assert rep.median == pytest.approx(np.median(per_cell))


def test_mrae_excludes_zero_denominators():
    rep = median_relative_absolute_error(np.array([0.0, 0.5]), 4, np.array([0.1, 0.5]))
    assert rep.n_excluded == 1 and rep.n_included == 1


def test_mrae_permutation_invariant(rng):
    t = rng.uniform(0.1, 0.9, 50)
    e = rng.uniform(0.1, 0.9, 50)
    perm = rng.permutation(50)
    assert median_relative_absolute_error(t, 5, e).median == \
        median_relative_absolute_error(t[perm], 5, e[perm]).median


def test_coverage_examples(rng):
    draws = rng.normal(size=(2000, 30))
    assert coverage_report(draws, np.median(draws, axis=0)) == 1.0
    assert coverage_report(draws, np.zeros(30), level=0.0) == 0.0
    truth = rng.normal(size=(40,))
    # truth is one more draw from the same spread around the centre
    centre = truth + rng.normal(size=40)
    calibrated = centre[None] + rng.normal(size=(4000, 40))
    cov = coverage_report(calibrated, truth, 0.95)
    assert 0.8 <= cov <= 1.0


def test_coverage_monotone_in_level(rng):
    draws = rng.normal(size=(500, 20))
    truth = rng.normal(size=20)
    vals = [coverage_report(draws, truth, lv) for lv in (0.1, 0.5, 0.8, 0.95)]
    assert vals == sorted(vals)


def test_coverage_needs_100_replicates():
    with pytest.raises(ValueError):
        coverage_report(np.zeros((50, 2)), np.zeros(2))


def test_summary_shapes(rng):
    s = summarize_draws(rng.random((120, 3, 2, 2)))
    assert set(s) == {"mean", "sd", "q025", "q975"}
    assert all(v.shape == (3, 2, 2) for v in s.values())
    assert np.all(s["q025"] <= s["q975"])
