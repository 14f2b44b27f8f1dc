import math

import numpy as np
import pytest

from mnstm.ars import NonConcaveKernelError, sample_shape_ars
from mnstm.gibbs import (ChainConfig, ConditionalSampler, SamplerDivergence,
                         build_beta_conditional, build_eta_conditional, build_xi_conditional,
                         draw_from_conditional, merge_duplicate_rows, posterior_proportions,
                         run_lmlb, run_mnstm, shape_kernels, state_probabilities)
from mnstm.model import CountPanel, MnStmSpec, assemble_mnstm
from mnstm.simulate import indicator_covariates, lattice_adjacency
from mnstm.spatial_basis import build_moran_basis_system, build_static_basis_system
from mnstm.validation import (_random_state, beta_binomial_exactness, conjugacy_oracles,
                              marginal_sampling_ks, small_model)


# ------------------------------------------------------------------ ARS

def test_ars_standard_normal(rng):
    x = np.array([sample_shape_ars(lambda v: -0.5 * v * v, (-math.inf, math.inf), rng,
                                   dlogf=lambda v: -v) for _ in range(20_000)])
    assert abs(x.mean()) < 4 / math.sqrt(x.size)
    assert x.var() == pytest.approx(1.0, rel=0.05)


def test_ars_gamma_mean(rng):
    x = np.array([sample_shape_ars(lambda v: math.log(v) - v, (0.0, math.inf), rng)
                  for _ in range(20_000)])
    assert abs(x.mean() - 2.0) < 4 * math.sqrt(2.0 / x.size)


def test_ars_kappa_kernel_respects_truncation(rng):
    model, _ = small_model()
    st = _random_state(model, rng)
    kern = shape_kernels(model, st, 1)["kappa_xi[1]"]
    alpha = st.alpha_xi[1]
    draws = [sample_shape_ars(kern.logf, kern.support, rng, dlogf=kern.dlogf) for _ in range(500)]
    assert min(draws) > alpha


def test_ars_detects_non_concavity(rng):
    def bimodal(v):
        return math.log(math.exp(-0.5 * (v - 2) ** 2) + math.exp(-0.5 * (v + 2) ** 2))
    with pytest.raises(NonConcaveKernelError, match="bimodal"):
        for _ in range(200):
            sample_shape_ars(bimodal, (-math.inf, math.inf), rng, name="bimodal")


# --------------------------------------------------------- conditionals

def test_beta_conditional_zero_state_and_positivity():
    model, _ = small_model()
    st = model.initial_state()
    spec = build_beta_conditional(model, st)
    assert not spec.mu_star[spec.blocks["likelihood"]].any()
    assert np.all(spec.alpha_star > 0) and np.all(spec.kappa_star > spec.alpha_star)


def test_eta_conditional_block_sizes():
    model, _ = small_model()
    st = model.initial_state()
    r = model.r
    t = 1
    spec = build_eta_conditional(model, st, t)
    assert list(spec.blocks) == ["likelihood", "prior_data", "prior_shape", "next_data",
                                 "next_shape"]
    live = int(model.slices[t].has_trials.sum())
    n_t, n_next = model.slices[t].y.size, model.slices[t + 1].y.size
    assert spec.H_star.shape == (live + n_t + n_next + 2 * r, r)
    last = build_eta_conditional(model, st, model.T - 1)
    assert list(last.blocks) == ["likelihood", "prior_data", "prior_shape"]


def test_eta_conditional_single_time_has_three_blocks():
    panel = CountPanel(np.array([[[3], [1], [0], [4]], [[1], [2], [2], [0]]]),
                       np.ones((4, 1), bool))
    A = lattice_adjacency(2, 2)
    X = indicator_covariates(4, 2, 1)
    basis = build_moran_basis_system(X, A, [panel.obs_rows(0)], 2, 1)
    model = assemble_mnstm(panel, basis)
    spec = build_eta_conditional(model, model.initial_state(), 0)
    assert list(spec.blocks) == ["likelihood", "prior_data", "prior_shape"]


def test_xi_conditional_stacks_identities():
    model, _ = small_model()
    st = model.initial_state()
    spec = build_xi_conditional(model, st, 0)
    m = st.xi[0].size
    s = model.spec.sigma
    np.testing.assert_array_equal(spec.H_star[spec.blocks["prior_data"]], s * np.eye(m))
    np.testing.assert_array_equal(spec.H_star[spec.blocks["prior_shape"]], np.eye(m))
    assert np.all(spec.alpha_star > 0)


def test_conjugacy_oracles_pass():
    res = conjugacy_oracles(n_points=50)
    assert res["passed"], res["gaps"]


def test_identity_spec_returns_raw_draws(rng):
    from mnstm.gibbs import FullConditionalSpec
    spec = FullConditionalSpec(np.eye(3), np.zeros(3), np.ones(3), np.full(3, 2.0), 3)
    draws = np.array([draw_from_conditional(spec, rng) for _ in range(20_000)])
    assert draws.var(axis=0) == pytest.approx(np.full(3, math.pi ** 2 / 3), rel=0.05)


def test_merging_preserves_kernel(rng):
    H = np.vstack([np.eye(2), np.eye(2), [[1.0, 1.0]]])
    mu = np.array([0.1, 0.2, 0.1, 0.2, 0.0])
    a = rng.uniform(0.5, 1, 5)
    k = a + 1
    Hm, mum, am, km, groups = merge_duplicate_rows(H, mu, a, k)
    np.testing.assert_array_equal(groups, [0, 1, 0, 1, 2])
    assert Hm.shape[0] == 3
    from mnstm.mlb_dist import conditional_mlb_logkernel
    for _ in range(10):
        q = rng.normal(size=2)
        assert conditional_mlb_logkernel(q, mu, H, a, k) == \
            pytest.approx(conditional_mlb_logkernel(q, mum, Hm, am, km), abs=1e-12)


def test_marginal_matches_quadrature():
    assert marginal_sampling_ks(n_draws=20_000)["metric"] < 0.05


# ----------------------------------------------------------------- chains

def test_fixed_seed_chain_is_bitwise_reproducible():
    model, _ = small_model()
    cfg = ChainConfig(iterations=30, seed=4)
    a, b = run_mnstm(model, cfg), run_mnstm(model, cfg)
    np.testing.assert_array_equal(a.pi_draws, b.pi_draws)
    np.testing.assert_array_equal(a.log_joint, b.log_joint)


def test_chains_differ_by_index():
    model, _ = small_model()
    cfg = ChainConfig(iterations=20, seed=4)
    a, b = run_mnstm(model, cfg, chain_index=0), run_mnstm(model, cfg, chain_index=1)
    assert not np.array_equal(a.pi_draws, b.pi_draws)


def test_chain_outputs_are_valid():
    model, _ = small_model()
    res = run_mnstm(model, ChainConfig(iterations=40, burn_in=10, thinning=3, seed=1))
    assert len(res.states) == 10
    assert np.all(np.isfinite(res.log_joint))
    np.testing.assert_allclose(res.pi_draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((res.pi_draws >= 0) & (res.pi_draws <= 1))
    assert all(s.shapes_valid() for s in res.states)


def test_static_sampler_requires_single_time():
    model, _ = small_model()
    with pytest.raises(ValueError):
        run_lmlb(model, ChainConfig(iterations=5))


@pytest.mark.parametrize("kw", [dict(iterations=10, burn_in=10), dict(thinning=0),
                                dict(n_chains=0), dict(xi_prediction="mean")])
def test_chain_config_validation(kw):
    with pytest.raises(ValueError):
        ChainConfig(**kw)


def test_zero_state_probabilities_cascade():
    model, _ = small_model()
    pi = state_probabilities(model, model.initial_state(), np.random.default_rng(0), "zero")
    np.testing.assert_allclose(pi[:, 0, 0], [0.5, 0.25, 0.25])
    draws = posterior_proportions([model.initial_state()] * 2, model, mode="zero")
    assert draws.shape == (2, model.K, model.N, model.T)


def test_divergence_reports_iteration(monkeypatch):
    model, _ = small_model()
    import mnstm.gibbs as g
    original = g.gibbs_sweep

    def broken(model, state, rng, sampler, update=True):
        original(model, state, rng, sampler, update)
        state.beta[:] = np.nan
        return state
    monkeypatch.setattr(g, "gibbs_sweep", broken)
    with pytest.raises(SamplerDivergence) as err:
        run_mnstm(model, ChainConfig(iterations=5))
    assert err.value.iteration == 0


def test_zero_information_panel_samples_shape_prior():
    # every cell masked in the static model: the fine-scale blocks are empty
    # and the xi shapes follow Exp(1) x Exp(1) restricted to kappa > alpha
    panel = CountPanel(np.zeros((3, 4, 1), int), np.zeros((4, 1), bool))
    basis = build_static_basis_system(np.ones((8, 1)), 2, n_layers=2,
                                      obs_rows=panel.obs_rows(0))
    model = assemble_mnstm(panel, basis)
    res = run_lmlb(model, ChainConfig(iterations=3000, burn_in=300, seed=2))
    a = res.trace("alpha_xi_0")
    k = res.trace("kappa_xi_0")
    assert a.mean() == pytest.approx(0.5, abs=0.05)
    assert k.mean() == pytest.approx(1.5, abs=0.08)
    assert np.all(k > a)


def test_unidentified_random_effect_reports_rank_loss():
    # no data and a rank-deficient precision factor leave eta without a proper prior
    panel = CountPanel(np.zeros((2, 4, 1), int), np.zeros((4, 1), bool))
    A = lattice_adjacency(2, 2)
    basis = build_moran_basis_system(indicator_covariates(4, 2, 1), A, [panel.obs_rows(0)], 2, 1)
    model = assemble_mnstm(panel, basis)
    with pytest.raises(np.linalg.LinAlgError, match="condition number"):
        run_mnstm(model, ChainConfig(iterations=3))


def test_beta_binomial_micro_case():
    res = beta_binomial_exactness(iterations=8000)
    assert res["passed"], res
