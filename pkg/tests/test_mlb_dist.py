import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from mnstm.mlb_dist import (LeastSquaresMap, LogitBetaParams, MlbParams, ParameterDomainError,
                            PolyaGammaParams, conditional_mlb_logkernel, logit_beta_logpdf,
                            logit_beta_variates, logit_beta_sample, marginal_mlb_sample,
                            mlb_logpdf, null_space_basis, pg_identity_sides, polya_gamma_sample,
                            polya_gamma_truncation_bound,
                            softplus, verify_pg_identity)
from mnstm.special import digamma


def test_logit_beta_symmetric_case_mean_and_variance():
    q = logit_beta_sample(LogitBetaParams(1.0, 2.0), 1_000_000, 1)
    se = q.std() / math.sqrt(q.size)
    assert abs(q.mean()) < 3 * se
    assert q.var() == pytest.approx(math.pi ** 2 / 3, rel=0.02)


def test_logit_beta_mean_matches_digamma():
    q = logit_beta_sample(LogitBetaParams(2.0, 5.0), 1_000_000, 2)
    se = q.std() / math.sqrt(q.size)
    assert abs(q.mean() - (digamma(2.0) - digamma(3.0))) < 3 * se


def test_small_shape_variates_are_finite(rng):
    q = logit_beta_variates(np.full(10_000, 0.01), np.full(10_000, 0.02), rng)
    assert np.all(np.isfinite(q))
    assert q.mean() == pytest.approx(LogitBetaParams(0.01, 0.02).mean, abs=4 * q.std() / 100)


@pytest.mark.parametrize("alpha,kappa", [(0.0, 1.0), (2.0, 2.0), (3.0, 1.0), (-1, 2)])
def test_invalid_shapes_rejected(alpha, kappa):
    with pytest.raises(ParameterDomainError):
        LogitBetaParams(alpha, kappa)


def test_logpdf_at_zero():
    assert logit_beta_logpdf(0.0, LogitBetaParams(1.0, 2.0)) == pytest.approx(-2 * math.log(2))


def test_logpdf_no_overflow_far_right():
    v = logit_beta_logpdf(50.0, LogitBetaParams(1.0, 2.0))
    assert v == pytest.approx(50 - 100, abs=1e-12)


@pytest.mark.parametrize("alpha,kappa", [(1.0, 2.0), (0.7, 3.0), (4.0, 4.5)])
def test_logpdf_integrates_to_one(alpha, kappa):
    p = LogitBetaParams(alpha, kappa)
    val, _ = integrate.quad(lambda q: math.exp(logit_beta_logpdf(q, p)), -np.inf, np.inf,
                            epsabs=1e-12, epsrel=1e-10, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_mlb_scalar_reduces_to_logit_beta():
    p = MlbParams(mu=[0.0], precision_factor=[[1.0]], alpha_vec=[1.5], kappa_vec=[4.0])
    assert mlb_logpdf([0.3], p) == pytest.approx(logit_beta_logpdf(0.3, LogitBetaParams(1.5, 4.0)))


def test_mlb_identity_separates():
    p = MlbParams(mu=[0, 0], precision_factor=np.eye(2), alpha_vec=[1, 2], kappa_vec=[2, 5])
    q = [0.4, -1.2]
    expected = (logit_beta_logpdf(0.4, LogitBetaParams(1, 2))
                + logit_beta_logpdf(-1.2, LogitBetaParams(2, 5)))
    assert mlb_logpdf(q, p) == pytest.approx(expected)


def test_mlb_scaling_adds_log_det():
    p = MlbParams(mu=[0, 0], precision_factor=[[2, 0], [0, 1]], alpha_vec=[1, 1],
                  kappa_vec=[2, 2])
    assert mlb_logpdf([0, 0], p) == pytest.approx(2 * (-2 * math.log(2)) + math.log(2))


def test_mlb_singular_factor_raises():
    p = MlbParams(mu=[0, 0], precision_factor=[[1, 1], [1, 1]], alpha_vec=[1, 1],
                  kappa_vec=[2, 2])
    with pytest.raises(np.linalg.LinAlgError):
        mlb_logpdf([0, 0], p)


def test_conditional_kernel_square_identity_matches_joint_without_constant():
    a, k = np.array([1.0, 2.0, 0.5]), np.array([3.0, 2.5, 1.0])
    q = np.array([0.1, -0.3, 2.0])
    p = MlbParams(mu=np.zeros(3), precision_factor=np.eye(3), alpha_vec=a, kappa_vec=k)
    const = sum(math.lgamma(kk) - math.lgamma(aa) - math.lgamma(kk - aa) for aa, kk in zip(a, k))
    assert conditional_mlb_logkernel(q, np.zeros(3), np.eye(3), a, k) == \
        pytest.approx(mlb_logpdf(q, p) - const)


def test_conditional_kernel_reparameterization(rng):
    # joint kernel at (q1, q2) with factor (H, B) equals the conditional kernel
    # with location c = mu - B q2
    for _ in range(20):
        H = rng.normal(size=(4, 2))
        B = null_space_basis(H)
        mu = rng.normal(size=4)
        a = rng.uniform(0.5, 2, size=4)
        k = a + rng.uniform(0.5, 2, size=4)
        q1, q2 = rng.normal(size=2), rng.normal(size=2)
        joint = conditional_mlb_logkernel(np.concatenate([q1, q2]), mu, np.hstack([H, B]), a, k)
        cond = conditional_mlb_logkernel(q1, mu - B @ q2, H, a, k)
        assert joint == pytest.approx(cond, abs=1e-12)


def test_null_space_is_orthonormal_and_orthogonal(rng):
    H = rng.normal(size=(6, 2))
    B = null_space_basis(H)
    assert B.shape == (6, 4)
    np.testing.assert_allclose(B.T @ B, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(H.T @ B, 0.0, atol=1e-12)


def test_least_squares_map_rank_deficient_reports_condition():
    with pytest.raises(np.linalg.LinAlgError, match="condition"):
        LeastSquaresMap(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))


def test_identity_map_returns_raw_logit_beta_draws():
    draws = marginal_mlb_sample(np.eye(1), [0.0], [1.0], [2.0], 200_000, 5)[:, 0]
    assert draws.var() == pytest.approx(math.pi ** 2 / 3, rel=0.02)


def test_polya_gamma_mean_is_quarter():
    w = polya_gamma_sample(PolyaGammaParams(1.0), 1_000_000, 3)
    assert w.mean() == pytest.approx(0.25, rel=0.01)


def _truncated_mean(b, K):
    k = np.arange(1, K + 1)
    return b / (2 * np.pi ** 2) * np.sum(1.0 / (k - 0.5) ** 2)


def test_polya_gamma_truncation_stable():
    # exact means of the truncated series
    m200, m400 = _truncated_mean(1.0, 200), _truncated_mean(1.0, 400)
    assert abs(m200 - m400) / m400 < 1e-3
    assert 0.25 - m200 <= polya_gamma_truncation_bound(1.0, 200)
    # sampled means agree with each other up to Monte Carlo error
    w200 = polya_gamma_sample(PolyaGammaParams(1.0, 200), 200_000, 4)
    w400 = polya_gamma_sample(PolyaGammaParams(1.0, 400), 200_000, 5)
    se = np.sqrt(w200.var() / w200.size + w400.var() / w400.size)
    assert abs(w200.mean() - w400.mean()) < 4 * se
    assert abs(w200.mean() - m200) < 4 * w200.std() / np.sqrt(w200.size)


def test_pg_identity_at_zero_is_exact():
    lhs, rhs = pg_identity_sides(1.0, 2.0, 0.0, np.array([0.3, 0.7]))
    assert lhs == pytest.approx(rhs, rel=1e-15)


@pytest.mark.parametrize("a,b,h", [(1.0, 2.0, 1.5), (0.5, 1.0, -3.0)])
def test_pg_identity_examples(a, b, h):
    assert verify_pg_identity(a, b, h, 1_000_000, 9) < 0.01


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 700))
def test_softplus_stable(x):
    v = float(softplus(x))
    assert math.isfinite(v)
    ref = max(x, 0.0) + math.log1p(math.exp(-abs(x)))
    assert v == pytest.approx(ref, rel=1e-12, abs=1e-300)
