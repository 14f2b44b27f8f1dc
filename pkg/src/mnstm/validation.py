"""Numerical property batteries for the sampler's building blocks.

Each battery returns a dict with ``name``, ``metric``, ``tolerance``, ``passed``
and ``seconds`` (plus battery-specific detail).  ``run_all`` runs them in order.
"""
from __future__ import annotations

import itertools
import time

import numpy as np

from .gibbs import (ChainConfig, build_beta_conditional, build_eta_conditional,
                    build_xi_conditional, run_mnstm, shape_kernels)
from .mlb_dist import (PolyaGammaParams, marginal_mlb_logpdf_quadrature, marginal_mlb_sample,
                       pg_identity_sides, polya_gamma_sample)
from .model import (CountPanel, MnStmSpec, assemble_mnstm, multinomial_logpmf_direct,
                    multinomial_logpmf_factored, stick_break_forward)
from .simulate import SimDesign, simulate_panel
from .spatial_basis import (BasisSystem, build_moran_basis_system, positive_approximant,
                            precision_objective, solve_precision_factor, stability_analysis)
from .special import trigamma


def _result(name, metric, tolerance, passed, start, **detail):
    out = {"name": name, "metric": float(metric), "tolerance": float(tolerance),
           "passed": bool(passed), "seconds": time.perf_counter() - start}
    out.update(detail)
    return out


# ---------------------------------------------------------------- marginal

TOY_MARGINALS = (
    dict(H=[1.0, 0.5, -0.8], mu=[0.2, -0.4, 1.0], alpha=[1.5, 0.7, 3.0], kappa=[3.0, 2.0, 4.5]),
    dict(H=[2.0, -1.0, 0.3], mu=[0.0, 0.5, -1.5], alpha=[0.4, 2.0, 1.1], kappa=[1.0, 6.0, 1.5]),
    dict(H=[0.6, 0.6, 0.6], mu=[1.0, 1.0, -1.0], alpha=[5.0, 0.5, 2.0], kappa=[7.0, 1.2, 3.0]),
)


def marginal_sampling_ks(n_draws: int = 100_000, seed: int = 11, tolerance: float = 0.05):
    """KS distance between least-squares-mapped draws and the quadrature marginal."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_spec = []
    for toy in TOY_MARGINALS:
        H = np.asarray(toy["H"])[:, None]
        draws = marginal_mlb_sample(H, toy["mu"], toy["alpha"], toy["kappa"], n_draws, rng)[:, 0]
        lo, hi = np.quantile(draws, [1e-5, 1 - 1e-5])
        pad = 0.5 * (hi - lo)
        grid = np.linspace(lo - pad, hi + pad, 801)
        logd = marginal_mlb_logpdf_quadrature(grid, H, toy["mu"], toy["alpha"], toy["kappa"])
        dens = np.exp(logd - logd.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        cdf /= cdf[-1]
        xs = np.sort(draws)
        F = np.interp(xs, grid, cdf)
        n = xs.size
        ks = max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n))
        per_spec.append(float(ks))
        worst = max(worst, ks)
    return _result("marginal_sampling_ks", worst, tolerance, worst < tolerance, start,
                   per_spec=per_spec)


# ----------------------------------------------------------- stick-breaking

def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def stick_breaking_factorization(max_K: int = 4, max_m: int = 6, seed: int = 3,
                                 tolerance: float = 1e-12):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for K in range(2, max_K + 1):
        pi = rng.dirichlet(np.ones(K))
        nu = np.log(stick_break_forward(pi[:, None])[:, 0])
        nu = nu - np.log1p(-np.exp(nu))
        for m in range(max_m + 1):
            for y in _compositions(m, K):
                y = np.asarray(y)
                a = multinomial_logpmf_direct(y, pi)
                b = multinomial_logpmf_factored(y, m, nu)
                worst = max(worst, abs(np.exp(a) - np.exp(b)))
                count += 1
    return _result("stick_breaking_factorization", worst, tolerance, worst <= tolerance, start,
                   n_outcomes=count)


# -------------------------------------------------------------- stability

def _random_orthogonal(r, rng):
    Q, R = np.linalg.qr(rng.normal(size=(r, r)))
    return Q * np.sign(np.diag(R))


def propagator_stability(ranks=(1, 3, 10), rhos=(0.5, 0.9, 0.99), horizon: int = 4000,
                         seed: int = 5, tolerance: float = 1e-6, term_tolerance: float = 1e-12):
    """Orthogonal propagators: partial sums reach r/(1-rho^2), terms equal r rho^(2j)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_sum, worst_term = 0.0, 0.0
    for r, rho in itertools.product(ranks, rhos):
        Psi = [_random_orthogonal(r, rng) for _ in range(7)]
        rep = stability_analysis(Psi, rho, horizon, tolerance)
        expected = r * rho ** (2.0 * np.arange(horizon))
        worst_term = max(worst_term, float(np.max(np.abs(rep.terms - expected))))
        worst_sum = max(worst_sum, abs(rep.partial_sums[-1] - rep.limit))
    passed = worst_sum < tolerance and worst_term <= term_tolerance
    return _result("propagator_stability", worst_sum, tolerance, passed, start,
                   worst_term_error=worst_term, term_tolerance=term_tolerance)


# ---------------------------------------------------------- precision factor

def precision_factor_checks(seed: int = 7, n_perturb: int = 100, size: float = 0.01,
                            tolerance: float = 1e-10):
    """Reconstruction, local optimality and the matched logit-beta variance."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    n, r = 40, 6
    Phi_P = np.linalg.qr(rng.normal(size=(n, r)))[0]
    Phi = Phi_P[rng.choice(n, size=25, replace=False)]
    G = rng.normal(size=(n, n))
    P = G @ G.T / n + 0.1 * np.eye(n)
    alpha, kappa = 1.3, 3.1
    V, var = solve_precision_factor(Phi_P, Phi, P, alpha, kappa)
    target = positive_approximant(Phi_P.T @ P @ Phi_P - Phi.T @ Phi)
    recon = float(np.linalg.norm(V.T @ V - target))
    base = precision_objective(V, Phi_P, Phi, P)
    worse = 0
    for _ in range(n_perturb):
        E = rng.normal(size=V.shape)
        E *= size / np.linalg.norm(E)
        if precision_objective(V + E, Phi_P, Phi, P) < base - 1e-12:
            worse += 1
    var_err = abs(var - (trigamma(alpha) + trigamma(kappa - alpha)))
    metric = max(recon, var_err)
    return _result("precision_factor", metric, tolerance,
                   recon < tolerance and var_err < tolerance and worse == 0, start,
                   reconstruction=recon, variance_error=var_err, n_better_perturbations=worse,
                   target_rank=int(np.linalg.matrix_rank(target)))


# ------------------------------------------------------------- Polya-Gamma

def polya_gamma_identity(n_draws: int = 1_000_000, seed: int = 13, tolerance: float = 0.01,
                         truncation: int = 200):
    """Relative error of the logistic mixture identity over a 3 x 3 x 5 grid."""
    start = time.perf_counter()
    a_vals = (0.0, 0.5, 1.0)
    b_vals = (0.5, 1.0, 2.0)
    h_vals = (-3.0, -1.5, 0.0, 1.5, 3.0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    grid = []
    for b in b_vals:
        omega = polya_gamma_sample(PolyaGammaParams(b, truncation), n_draws, rng)
        for a, h in itertools.product(a_vals, h_vals):
            lhs, rhs = pg_identity_sides(a, b, h, omega)
            err = abs(lhs - rhs) / lhs
            grid.append((a, b, h, err))
            worst = max(worst, err)
    return _result("polya_gamma_identity", worst, tolerance, worst < tolerance, start,
                   n_points=len(grid))


# -------------------------------------------------------------- conjugacy

def small_model(seed: int = 2, eps_scheme: str = "split"):
    """A 2x3 lattice, K=3, T=4, r=3 panel for fast oracle checks."""
    design = SimDesign("empirical_mnstm", N=6, K=3, T=4, r=3, observed_fraction=0.67,
                       grid_shape=(2, 3), total_low=5, total_high=40)
    sim = simulate_panel(design, seed)
    P = sim.panel
    obs = [P.obs_rows(t) for t in range(P.T)]
    basis = build_moran_basis_system(sim.covariates, sim.adjacency, obs, 3, P.K - 1)
    return assemble_mnstm(P, basis, MnStmSpec(eps_scheme=eps_scheme)), sim


def _random_state(model, rng):
    st = model.initial_state()
    st.beta = rng.normal(0, 0.5, size=st.beta.shape)
    st.eta = rng.normal(0, 0.5, size=st.eta.shape)
    st.xi = [rng.normal(0, 0.5, size=x.shape) for x in st.xi]
    st.alpha_beta, st.kappa_beta = 0.8, 2.1
    st.alpha_eta = rng.uniform(0.5, 2.0, size=model.T)
    st.kappa_eta = st.alpha_eta + rng.uniform(0.5, 2.0, size=model.T)
    st.alpha_xi = rng.uniform(0.5, 2.0, size=model.T)
    st.kappa_xi = st.alpha_xi + rng.uniform(0.5, 2.0, size=model.T)
    return st


def _kernel_gap(model, state, builder, setter, dim, rng, n_points):
    spec = builder()
    direction = rng.normal(size=dim)
    offsets = []
    for s in np.linspace(-2.0, 2.0, n_points):
        q = s * direction + rng.normal(0, 0.3, size=dim)
        trial = state.copy()
        setter(trial, q)
        offsets.append(model.log_joint(trial) - spec.logkernel(q))
    return float(np.std(offsets))


def conjugacy_oracles(n_points: int = 50, seed: int = 17, tolerance: float = 1e-8):
    """Conditional kernels differ from the joint log-density by a constant."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    gaps = {}
    for scheme in ("split", "empirical_bayes"):
        model, _ = small_model(eps_scheme=scheme)
        st = _random_state(model, rng)
        T = model.T

        def set_beta(s, q):
            s.beta = q
        gaps[f"{scheme}:beta"] = _kernel_gap(model, st, lambda: build_beta_conditional(model, st),
                                             set_beta, model.p, rng, n_points)
        for t in (0, T // 2, T - 1):
            def set_eta(s, q, t=t):
                s.eta[t] = q
            gaps[f"{scheme}:eta[{t}]"] = _kernel_gap(
                model, st, lambda t=t: build_eta_conditional(model, st, t), set_eta,
                model.r, rng, n_points)
        for t in range(T):
            def set_xi(s, q, t=t):
                s.xi[t] = q
            gaps[f"{scheme}:xi[{t}]"] = _kernel_gap(
                model, st, lambda t=t: build_xi_conditional(model, st, t), set_xi,
                st.xi[t].size, rng, n_points)
    worst = max(gaps.values())
    return _result("conjugacy_oracles", worst, tolerance, worst < tolerance, start, gaps=gaps)


# -------------------------------------------------------- shape kernels

SHAPE_FAMILIES = ("alpha_beta", "kappa_beta", "alpha_eta_first", "kappa_eta_first",
                  "alpha_eta", "kappa_eta", "alpha_xi", "kappa_xi")


def _family(key):
    return key.split("[")[0]


def shape_log_concavity(n_states: int = 20, n_points: int = 200, seed: int = 19,
                        tolerance: float = 1e-8):
    """Largest second difference of every shape kernel on randomized states."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    model, _ = small_model()
    worst = -np.inf
    seen = set()
    for _ in range(n_states):
        st = _random_state(model, rng)
        st.beta = rng.normal(0, 2.0, size=st.beta.shape)
        st.xi = [rng.normal(0, 2.0, size=x.shape) for x in st.xi]
        for key, kern in shape_kernels(model, st).items():
            fam = _family(key)
            seen.add(fam)
            lo, hi = kern.support
            if np.isinf(hi):
                hi = lo + 60.0
            span = hi - lo
            xs = np.linspace(lo + 0.005 * span, hi - 0.005 * span, n_points)
            h = 1e-3 * span / n_points
            vals = np.array([[kern.logf(x - h), kern.logf(x), kern.logf(x + h)] for x in xs])
            second = vals[:, 0] - 2 * vals[:, 1] + vals[:, 2]
            worst = max(worst, float(second.max()))
    missing = set(SHAPE_FAMILIES) - seen
    return _result("shape_log_concavity", worst, tolerance,
                   worst <= tolerance and not missing, start, families=sorted(seen))


# ------------------------------------------------------- beta-binomial

def beta_binomial_model(y: int = 7, m: int = 12, spec: MnStmSpec | None = None):
    """K=2, one unit, one time point, no covariates and no basis."""
    panel = CountPanel(np.array([[[y]], [[m - y]]]), np.ones((1, 1), dtype=bool))
    basis = BasisSystem(X_P=[np.zeros((1, 0))], Phi_P=[np.zeros((1, 0))],
                        M=[np.zeros((0, 0))], V=[np.zeros((0, 0))],
                        obs_rows=[np.arange(1)], r=0, n_layers=1, info={"basis": "none"})
    return assemble_mnstm(panel, basis, spec or MnStmSpec())


def beta_binomial_exactness(iterations: int = 20_000, seed: int = 23, y: int = 7, m: int = 12,
                            n_se: float = 3.0):
    """Posterior mean of p against alpha_tot / kappa_tot with shapes held fixed."""
    start = time.perf_counter()
    model = beta_binomial_model(y, m)
    res = run_mnstm(model, ChainConfig(iterations=iterations, burn_in=0, seed=seed,
                                       update_shapes=False))
    sl = model.slices[0]
    st = model.initial_state()
    rho, s = model.spec.rho, model.spec.sigma
    a_tot = (rho * y + sl.eps_lik[0]) + ((1 - rho) * y + sl.eps_prior[0] - sl.eps_lik[0]) / s \
        + st.alpha_xi[0]
    k_tot = sl.n[0] + sl.delta[0] + st.kappa_xi[0]
    exact = a_tot / k_tot
    draws = res.pi_draws[:, 0, 0, 0]
    from .diagnostics import effective_sample_size
    se = draws.std(ddof=1) / np.sqrt(effective_sample_size(draws))
    z = abs(draws.mean() - exact) / se
    return _result("beta_binomial_exactness", z, n_se, z < n_se, start,
                   exact_mean=float(exact), sampled_mean=float(draws.mean()), mc_se=float(se))


def run_all(quick: bool = False) -> list:
    if quick:
        return [marginal_sampling_ks(n_draws=20_000), stick_breaking_factorization(),
                propagator_stability(), precision_factor_checks(),
                polya_gamma_identity(n_draws=100_000, tolerance=0.03),
                conjugacy_oracles(n_points=20), shape_log_concavity(n_states=5, n_points=50),
                beta_binomial_exactness(iterations=5000)]
    return [marginal_sampling_ks(), stick_breaking_factorization(), propagator_stability(),
            precision_factor_checks(), polya_gamma_identity(), conjugacy_oracles(),
            shape_log_concavity(), beta_binomial_exactness()]
