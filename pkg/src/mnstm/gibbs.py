"""Collapsed Gibbs samplers for the static latent-MLB model and the MN-STM.

Every latent block is drawn with the least-squares marginal sampler from a
conditional MLB whose stacked rows come from the likelihood and the priors
that involve the block.  Shape parameters are drawn by adaptive rejection.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .ars import NonConcaveKernelError, sample_shape_ars
from .mlb_dist import (LeastSquaresMap, _check_shapes, conditional_mlb_logkernel,
                       logit_beta_variates, sigmoid, softplus)
from .model import ChainState, MnStmModel, stick_break_inverse
from .special import digamma, trigamma

log = logging.getLogger(__name__)


class SamplerDivergence(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class FullConditionalSpec:
    """Stacked conditional MLB: kernel alpha'(H q - mu) - kappa' softplus(H q - mu)."""

    H_star: np.ndarray
    mu_star: np.ndarray
    alpha_star: np.ndarray
    kappa_star: np.ndarray
    target_len: int
    blocks: dict = field(default_factory=dict)
    key: tuple | None = None

    def __post_init__(self):
        m, d = self.H_star.shape
        if d != self.target_len:
            raise ValueError("H_star width disagrees with target_len")
        for name in ("mu_star", "alpha_star", "kappa_star"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have {m} entries")
        _check_shapes(self.alpha_star, self.kappa_star)

    def logkernel(self, q) -> float:
        return conditional_mlb_logkernel(q, self.mu_star, self.H_star,
                                         self.alpha_star, self.kappa_star)


@dataclass
class ChainConfig:
    iterations: int = 2000
    burn_in: int | None = None
    thinning: int = 1
    seed: int = 0
    n_chains: int = 1
    merge_rows: bool = True
    xi_prediction: str = "prior"
    update_shapes: bool = True

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.iterations // 10
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.xi_prediction not in ("prior", "zero"):
            raise ValueError("xi_prediction must be 'prior' or 'zero'")


# ------------------------------------------------------------ conditionals

def _stack(blocks, target_len, key):
    spans, pos = {}, 0
    for H, _, _, _, name in blocks:
        spans[name] = slice(pos, pos + H.shape[0])
        pos += H.shape[0]
    return FullConditionalSpec(
        H_star=np.vstack([b[0] for b in blocks]),
        mu_star=np.concatenate([b[1] for b in blocks]),
        alpha_star=np.concatenate([b[2] for b in blocks]),
        kappa_star=np.concatenate([b[3] for b in blocks]),
        target_len=target_len, blocks=spans, key=key)


def _likelihood_rows(sl, spec):
    """(mask, alpha, kappa) for the likelihood block and alpha for the prior block."""
    s, rho = spec.sigma, spec.rho
    live = sl.has_trials
    a_lik = rho * sl.y[live] + sl.eps_lik[live]
    k_lik = sl.n[live]
    eps2 = sl.eps_prior - sl.eps_lik
    a_prior = np.where(live, ((1 - rho) * sl.y + eps2) / s, sl.eps_prior / s)
    return live, a_lik, k_lik, a_prior


def build_beta_conditional(model: MnStmModel, state: ChainState) -> FullConditionalSpec:
    p = model.p
    s = model.spec.sigma
    blocks_lik, blocks_prior = [], []
    for t, sl in enumerate(model.slices):
        live, a_lik, k_lik, a_prior = _likelihood_rows(sl, model.spec)
        offset = sl.Phi @ state.eta[t] + state.xi[t]
        blocks_lik.append((sl.X[live], -offset[live], a_lik, k_lik))
        blocks_prior.append((s * sl.X, np.zeros(sl.y.size), a_prior, sl.delta))

    def cat(bl, j):
        parts = [b[j] for b in bl]
        return np.vstack(parts) if j == 0 else np.concatenate(parts)

    blocks = [
        (cat(blocks_lik, 0), cat(blocks_lik, 1), cat(blocks_lik, 2), cat(blocks_lik, 3), "likelihood"),
        (cat(blocks_prior, 0), cat(blocks_prior, 1), cat(blocks_prior, 2), cat(blocks_prior, 3), "prior_data"),
        (np.eye(p), np.zeros(p), np.full(p, state.alpha_beta), np.full(p, state.kappa_beta), "prior_shape"),
    ]
    return _stack(blocks, p, ("beta",))


def build_eta_conditional(model: MnStmModel, state: ChainState, t: int) -> FullConditionalSpec:
    """Conditional for eta_t (0-based t); includes eta_{t+1}'s prior when t < T-1."""
    r, T = model.r, model.T
    s = model.spec.sigma
    sl = model.slices[t]
    M, V = model.basis.M, model.basis.V
    live, a_lik, k_lik, a_prior = _likelihood_rows(sl, model.spec)
    prev = M[t] @ state.eta[t - 1] if t > 0 else np.zeros(r)
    offset = sl.X @ state.beta + state.xi[t]
    blocks = [
        (sl.Phi[live], -offset[live], a_lik, k_lik, "likelihood"),
        (s * sl.Phi, s * (sl.Phi @ prev), a_prior, sl.delta, "prior_data"),
        (V[t], V[t] @ prev, np.full(r, state.alpha_eta[t]), np.full(r, state.kappa_eta[t]), "prior_shape"),
    ]
    if t < T - 1:
        nx = model.slices[t + 1]
        Mn = M[t + 1]
        nxt = state.eta[t + 1]
        blocks += [
            (-s * nx.Phi @ Mn, -s * (nx.Phi @ nxt), nx.eps_prior / s, nx.delta, "next_data"),
            (-V[t + 1] @ Mn, -(V[t + 1] @ nxt), np.full(r, state.alpha_eta[t + 1]),
             np.full(r, state.kappa_eta[t + 1]), "next_shape"),
        ]
    return _stack(blocks, r, ("eta", t))


def build_xi_conditional(model: MnStmModel, state: ChainState, t: int) -> FullConditionalSpec:
    sl = model.slices[t]
    m = sl.y.size
    s = model.spec.sigma
    live, a_lik, k_lik, a_prior = _likelihood_rows(sl, model.spec)
    I = np.eye(m)
    offset = sl.X @ state.beta + sl.Phi @ state.eta[t]
    blocks = [
        (I[live], -offset[live], a_lik, k_lik, "likelihood"),
        (s * I, np.zeros(m), a_prior, sl.delta, "prior_data"),
        (I, np.zeros(m), np.full(m, state.alpha_xi[t]), np.full(m, state.kappa_xi[t]), "prior_shape"),
    ]
    return _stack(blocks, m, ("xi", t))


def merge_duplicate_rows(H, mu, alpha, kappa):
    """Combine rows that share both the H row and the location.

    Rows with the same (h, mu) contribute (a1 + a2) z - (k1 + k2) softplus(z)
    to the kernel, so merging them leaves the conditional unchanged.  Returns
    None when all rows are distinct, otherwise (H, mu, alpha, kappa, groups).
    """
    if H.shape[0] < 2:
        return None
    key = np.ascontiguousarray(np.column_stack([H, mu]))
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if first.size == H.shape[0]:
        return None
    order = np.argsort(first, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    groups = relabel[inverse]
    reps = first[order]
    a = np.bincount(groups, weights=alpha, minlength=reps.size)
    k = np.bincount(groups, weights=kappa, minlength=reps.size)
    return H[reps], mu[reps], a, k, groups


class ConditionalSampler:
    """Draws from FullConditionalSpec objects, caching least-squares maps."""

    def __init__(self, merge_rows: bool = True):
        self.merge_rows = merge_rows
        self._cache = {}

    def _map(self, key, H, signature):
        if key is None:
            return LeastSquaresMap(H)
        ck = (key, signature)
        lsq = self._cache.get(ck)
        if lsq is None:
            lsq = LeastSquaresMap(H)
            self._cache[ck] = lsq
        return lsq

    def draw(self, spec: FullConditionalSpec, rng: np.random.Generator) -> np.ndarray:
        H, mu, a, k = spec.H_star, spec.mu_star, spec.alpha_star, spec.kappa_star
        signature = None
        if self.merge_rows:
            merged = merge_duplicate_rows(H, mu, a, k)
            if merged is not None:
                H, mu, a, k, groups = merged
                signature = groups.tobytes()
        lsq = self._map(spec.key, H, signature)
        w = logit_beta_variates(a, k, rng)
        return lsq(mu + w)


def draw_from_conditional(spec: FullConditionalSpec, rng, merge_rows: bool = True) -> np.ndarray:
    """One least-squares marginal draw (H'H)^{-1}H'(mu + w)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return ConditionalSampler(merge_rows).draw(spec, rng)


# ------------------------------------------------------------ shape kernels

@dataclass
class ShapeKernel:
    """Log-density (up to a constant) of one shape parameter and its support."""

    name: str
    logf: object
    dlogf: object
    support: tuple

    def __call__(self, x):
        return self.logf(x)


def _alpha_kernel(name, n_rows, S, kappa, a, tau):
    def logf(x):
        return (-n_rows * (math.lgamma(x) + math.lgamma(kappa - x)) + x * S
                + (a - 1) * math.log(x) - tau * x)

    def dlogf(x):
        return (-n_rows * (digamma(x) - digamma(kappa - x)) + S
                + (a - 1) / x - tau)
    return ShapeKernel(name, logf, dlogf, (0.0, float(kappa)))


def _kappa_kernel(name, n_rows, L, alpha, a, tau):
    def logf(x):
        return (n_rows * (math.lgamma(x) - math.lgamma(x - alpha)) - x * L
                + (a - 1) * math.log(x) - tau * x)

    def dlogf(x):
        return (n_rows * (digamma(x) - digamma(x - alpha)) - L
                + (a - 1) / x - tau)
    return ShapeKernel(name, logf, dlogf, (float(alpha), math.inf))


def shape_block_values(model: MnStmModel, state: ChainState, block: str, t: int = 0):
    """Rows z entering the shape-carrying MLB rows of a block."""
    if block == "beta":
        return state.beta
    if block == "eta":
        return model.basis.V[t] @ model.eta_innovation(state, t)
    if block == "xi":
        return state.xi[t]
    raise ValueError(block)


def shape_kernels(model: MnStmModel, state: ChainState, t: int | None = None) -> dict:
    """The eight shape-kernel families evaluated at the current state.

    Keys: alpha_beta, kappa_beta, and for time t: alpha_eta (t > 0) or
    alpha_eta_first (t = 0), kappa_eta / kappa_eta_first, alpha_xi, kappa_xi.
    """
    sp = model.spec
    out = {}
    zb = shape_block_values(model, state, "beta")
    out["alpha_beta"] = _alpha_kernel("alpha_beta", zb.size, float(zb.sum()),
                                      state.kappa_beta, sp.a_beta_1, sp.tau_beta_1)
    out["kappa_beta"] = _kappa_kernel("kappa_beta", zb.size, float(softplus(zb).sum()),
                                      state.alpha_beta, sp.a_beta, sp.tau_beta)
    times = range(model.T) if t is None else [t]
    for tt in times:
        ze = shape_block_values(model, state, "eta", tt)
        suffix = "_first" if tt == 0 else ""
        tag = f"[{tt}]"
        out[f"alpha_eta{suffix}{tag}"] = _alpha_kernel(
            f"alpha_eta{suffix}{tag}", ze.size, float(ze.sum()), state.kappa_eta[tt],
            sp.a_eta_1, sp.tau_eta_1)
        out[f"kappa_eta{suffix}{tag}"] = _kappa_kernel(
            f"kappa_eta{suffix}{tag}", ze.size, float(softplus(ze).sum()), state.alpha_eta[tt],
            sp.a_eta, sp.tau_eta)
        zx = shape_block_values(model, state, "xi", tt)
        out[f"alpha_xi{tag}"] = _alpha_kernel(
            f"alpha_xi{tag}", zx.size, float(zx.sum()), state.kappa_xi[tt],
            sp.a_xi_1, sp.tau_xi_1)
        out[f"kappa_xi{tag}"] = _kappa_kernel(
            f"kappa_xi{tag}", zx.size, float(softplus(zx).sum()), state.alpha_xi[tt],
            sp.a_xi, sp.tau_xi)
    return out


def _draw_shape(kernel: ShapeKernel, rng):
    try:
        return sample_shape_ars(kernel.logf, kernel.support, rng, dlogf=kernel.dlogf,
                                name=kernel.name)
    except NonConcaveKernelError:
        raise
    except (ValueError, RuntimeError) as exc:
        raise NonConcaveKernelError(f"{kernel.name}: {exc}") from exc


def update_shapes(model: MnStmModel, state: ChainState, rng) -> None:
    """Draw every alpha then its kappa, in block order beta, eta_t, xi_t."""
    sp = model.spec
    zb = shape_block_values(model, state, "beta")
    state.alpha_beta = _draw_shape(_alpha_kernel(
        "alpha_beta", zb.size, float(zb.sum()), state.kappa_beta, sp.a_beta_1, sp.tau_beta_1), rng)
    state.kappa_beta = _draw_shape(_kappa_kernel(
        "kappa_beta", zb.size, float(softplus(zb).sum()), state.alpha_beta, sp.a_beta, sp.tau_beta), rng)
    for t in range(model.T):
        ze = shape_block_values(model, state, "eta", t)
        lbl = f"eta[{t}]"
        state.alpha_eta[t] = _draw_shape(_alpha_kernel(
            "alpha_" + lbl, ze.size, float(ze.sum()), state.kappa_eta[t], sp.a_eta_1, sp.tau_eta_1), rng)
        state.kappa_eta[t] = _draw_shape(_kappa_kernel(
            "kappa_" + lbl, ze.size, float(softplus(ze).sum()), state.alpha_eta[t], sp.a_eta, sp.tau_eta), rng)
    for t in range(model.T):
        zx = shape_block_values(model, state, "xi", t)
        lbl = f"xi[{t}]"
        state.alpha_xi[t] = _draw_shape(_alpha_kernel(
            "alpha_" + lbl, zx.size, float(zx.sum()), state.kappa_xi[t], sp.a_xi_1, sp.tau_xi_1), rng)
        state.kappa_xi[t] = _draw_shape(_kappa_kernel(
            "kappa_" + lbl, zx.size, float(softplus(zx).sum()), state.alpha_xi[t], sp.a_xi, sp.tau_xi), rng)


# ----------------------------------------------------------------- sweeps

@dataclass
class ChainResult:
    states: list
    pi_draws: np.ndarray | None
    config: ChainConfig
    log_joint: np.ndarray
    iterations_run: int
    chain_index: int = 0

    def trace(self, name: str) -> np.ndarray:
        names = self.states[0].flat_names()
        j = names.index(name)
        return np.array([s.flat()[j] for s in self.states])


def gibbs_sweep(model: MnStmModel, state: ChainState, rng, sampler: ConditionalSampler,
                update_shape_params: bool = True) -> ChainState:
    """beta, eta_1..eta_T, xi_1..xi_T, then shapes.  Mutates and returns state."""
    if model.p:
        state.beta = sampler.draw(build_beta_conditional(model, state), rng)
    if model.r:
        for t in range(model.T):
            state.eta[t] = sampler.draw(build_eta_conditional(model, state, t), rng)
    for t in range(model.T):
        if model.slices[t].y.size:
            state.xi[t] = sampler.draw(build_xi_conditional(model, state, t), rng)
    if update_shape_params:
        update_shapes(model, state, rng)
    return state


def predictive_xi(model: MnStmModel, state: ChainState, t: int, rng, mode: str = "prior"):
    """Fine-scale terms on the full prediction grid at time t.

    Observed rows carry the current draw.  Unobserved rows get a draw from
    the shape-carrying row of the fine-scale prior, logit-beta(alpha_xi,
    kappa_xi), or zero when ``mode == "zero"``.
    """
    grid = model.basis.X_P[t].shape[0]
    xi = np.zeros(grid)
    rows = model.slices[t].rows
    missing = np.setdiff1d(np.arange(grid), rows, assume_unique=True)
    if mode == "prior" and missing.size:
        a, k = state.alpha_xi[t], state.kappa_xi[t]
        xi[missing] = logit_beta_variates(np.full(missing.size, a), np.full(missing.size, k), rng)
    xi[rows] = state.xi[t]
    return xi


def state_probabilities(model: MnStmModel, state: ChainState, rng, mode: str = "prior"):
    """pi[k, i, t] over the full grid for one state (K x N x T)."""
    K, N, T = model.K, model.N, model.T
    out = np.empty((K, N, T))
    for t in range(T):
        xi = predictive_xi(model, state, t, rng, mode)
        nu = model.prediction_logits(state, t, xi_full=xi)
        p = sigmoid(nu).reshape(K - 1, N)
        out[:, :, t] = stick_break_inverse(p)
    return out


def run_mnstm(model: MnStmModel, config: ChainConfig, initial: ChainState | None = None,
              callback=None, chain_index: int = 0, keep_states: bool = True) -> ChainResult:
    """Run one chain.  ``callback(iteration, state, pi, log_joint)`` sees every kept draw."""
    ss = np.random.SeedSequence([int(config.seed), int(chain_index)])
    rng_latent, rng_pred = [np.random.default_rng(s) for s in ss.spawn(2)]
    state = (initial or model.initial_state()).copy()
    sampler = ConditionalSampler(config.merge_rows)
    kept, pis, lj = [], [], []
    for it in range(config.iterations):
        gibbs_sweep(model, state, rng_latent, sampler, config.update_shapes)
        if not state.is_finite():
            raise SamplerDivergence(it, "non-finite state")
        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            pi = state_probabilities(model, state, rng_pred, config.xi_prediction)
            value = model.log_joint(state)
            if not np.isfinite(value):
                raise SamplerDivergence(it, "joint log-density is not finite")
            lj.append(value)
            pis.append(pi)
            if keep_states:
                kept.append(state.copy())
            if callback is not None:
                callback(it, state, pi, value)
    return ChainResult(states=kept, pi_draws=np.stack(pis) if pis else None,
                       config=config, log_joint=np.array(lj),
                       iterations_run=config.iterations, chain_index=chain_index)


def run_lmlb(model: MnStmModel, config: ChainConfig, **kwargs) -> ChainResult:
    """Static (T=1) latent-MLB logistic model sampler."""
    if model.T != 1:
        raise ValueError("the static sampler needs a single time point")
    return run_mnstm(model, config, **kwargs)


def posterior_proportions(chain, model: MnStmModel, rng=None, mode: str = "prior") -> np.ndarray:
    """Per-replicate probability tensors, shape (B, K, N, T)."""
    if isinstance(chain, ChainResult):
        if chain.pi_draws is not None:
            return chain.pi_draws
        states = chain.states
    else:
        states = list(chain)
    if not states:
        raise ValueError("empty chain")
    rng = np.random.default_rng(0) if rng is None else rng
    return np.stack([state_probabilities(model, s, rng, mode) for s in states])
