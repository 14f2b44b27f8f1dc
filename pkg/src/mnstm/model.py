"""Multinomial data model, stick-breaking maps and the MN-STM joint density."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import gammaln

from .mlb_dist import conditional_mlb_logkernel, sigmoid, softplus
from .spatial_basis import BasisSystem


# ------------------------------------------------------------------ panels

@dataclass
class CountPanel:
    """Counts Y[k, i, t] with an (i, t) observation mask.

    Counts at unobserved cells are ignored and stored as zero.
    """

    counts: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.counts)
        if Y.ndim != 3:
            raise ValueError("counts must be a (K, N, T) array")
        if Y.size and (np.any(Y < 0) or not np.all(np.equal(np.mod(Y, 1), 0))):
            raise ValueError("counts must be nonnegative integers")
        obs = np.asarray(self.observed, dtype=bool)
        if obs.shape != Y.shape[1:]:
            raise ValueError(f"mask shape {obs.shape} does not match counts {Y.shape[1:]}")
        if Y.shape[0] < 2:
            raise ValueError("need at least two categories")
        self.counts = np.where(obs[None], Y, 0).astype(np.int64)
        self.observed = obs

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def N(self) -> int:
        return self.counts.shape[1]

    @property
    def T(self) -> int:
        return self.counts.shape[2]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def N_t(self) -> np.ndarray:
        return self.observed.sum(axis=0)

    @property
    def n(self) -> int:
        return int((self.K - 1) * self.N_t.sum())

    def observed_units(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.observed[:, t])

    def obs_rows(self, t: int) -> np.ndarray:
        """Prediction-grid rows (k*N + i, k < K-1) observed at time t."""
        units = self.observed_units(t)
        return (np.arange(self.K - 1)[:, None] * self.N + units[None, :]).ravel()

    def remaining_trials(self) -> np.ndarray:
        """n[k, i, t] = m_it - sum_{j<k} Y[j, i, t] for k < K-1."""
        cum = np.cumsum(self.counts, axis=0)
        before = np.concatenate([np.zeros((1,) + self.counts.shape[1:], np.int64),
                                 cum[:-1]], axis=0)
        return (self.totals[None] - before)[: self.K - 1]


# ---------------------------------------------------------- stick breaking

def stick_break_forward(pi) -> np.ndarray:
    """Conditional probabilities p_k = pi_k / (1 - sum_{j<k} pi_j), k < K."""
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0) or np.any(pi >= 1):
        raise ValueError("probabilities must lie in (0, 1)")
    if abs(pi.sum(axis=0) - 1.0).max() > 1e-12 if pi.ndim > 1 else abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError("probabilities must sum to one")
    cum = np.cumsum(pi, axis=0)
    remaining = 1.0 - np.concatenate([np.zeros_like(pi[:1]), cum[:-2]], axis=0)
    return pi[:-1] / remaining


def stick_break_inverse(p) -> np.ndarray:
    """Map conditional probabilities (axis 0 of length K-1) back to the simplex."""
    p = np.asarray(p, dtype=float)
    leftover = np.cumprod(1.0 - p, axis=0)
    before = np.concatenate([np.ones_like(p[:1]), leftover[:-1]], axis=0)
    return np.concatenate([p * before, leftover[-1:]], axis=0)


def multinomial_logpmf_factored(y, m, nu) -> float:
    """Multinomial log pmf through the K-1 binomial factors with logits nu."""
    y = np.asarray(y, dtype=np.int64)
    nu = np.asarray(nu, dtype=float)
    if y.sum() != m:
        raise ValueError(f"counts sum to {y.sum()}, expected total {m}")
    if nu.shape != (y.size - 1,):
        raise ValueError("need K-1 logits")
    n_k = m - np.concatenate([[0], np.cumsum(y)[:-2]])
    yk = y[:-1]
    comb = gammaln(n_k + 1) - gammaln(yk + 1) - gammaln(n_k - yk + 1)
    return float(np.sum(comb + yk * nu - n_k * softplus(nu)))


def multinomial_logpmf_direct(y, pi) -> float:
    y = np.asarray(y, dtype=np.int64)
    pi = np.asarray(pi, dtype=float)
    m = y.sum()
    terms = np.where(y > 0, y * np.log(np.where(y > 0, pi, 1.0)), 0.0)
    return float(gammaln(m + 1) - gammaln(y + 1).sum() + terms.sum())


# ------------------------------------------------------------ model spec

@dataclass
class MnStmSpec:
    """Hyperparameters.

    ``eps_scheme`` selects how the likelihood offset is split between the
    two likelihood blocks of each full conditional: ``"split"`` uses eps/2
    in each block, ``"empirical_bayes"`` uses eps1 = eps_base and
    eps2 = sigma*rho*y - (1-rho)*y/sigma + eps_base*sigma.
    """

    sigma: float = 1.0
    rho: float = 0.9
    eps: float = 0.05
    eps_scheme: str = "split"
    delta: np.ndarray | None = None
    delta_floor: float = 1.0
    a_beta: float = 1.0
    tau_beta: float = 1.0
    a_eta: float = 1.0
    tau_eta: float = 1.0
    a_xi: float = 1.0
    tau_xi: float = 1.0
    a_beta_1: float = 1.0
    tau_beta_1: float = 1.0
    a_eta_1: float = 1.0
    tau_eta_1: float = 1.0
    a_xi_1: float = 1.0
    tau_xi_1: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.eps_scheme not in ("split", "empirical_bayes"):
            raise ValueError(f"unknown eps_scheme {self.eps_scheme!r}")
        if not self.delta_floor > 0:
            raise ValueError("delta_floor must be > 0")
        for f in fields(self):
            if f.name.startswith(("a_", "tau_")) and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be > 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = None if v is None and f.name == "delta" else (
                np.asarray(v).tolist() if f.name == "delta" else v)
        return out


SHAPE_KEYS = ("alpha_beta", "kappa_beta", "alpha_eta", "kappa_eta",
              "alpha_xi", "kappa_xi")


@dataclass
class ChainState:
    beta: np.ndarray
    eta: np.ndarray
    xi: list
    alpha_beta: float = 1.0
    kappa_beta: float = 2.0
    alpha_eta: np.ndarray = None
    kappa_eta: np.ndarray = None
    alpha_xi: np.ndarray = None
    kappa_xi: np.ndarray = None

    def __post_init__(self):
        T = self.eta.shape[0]
        for name, default in (("alpha_eta", 1.0), ("kappa_eta", 2.0),
                              ("alpha_xi", 1.0), ("kappa_xi", 2.0)):
            v = getattr(self, name)
            setattr(self, name, np.full(T, default) if v is None
                    else np.asarray(v, dtype=float).copy())

    def copy(self) -> "ChainState":
        return ChainState(beta=self.beta.copy(), eta=self.eta.copy(),
                          xi=[x.copy() for x in self.xi],
                          alpha_beta=float(self.alpha_beta),
                          kappa_beta=float(self.kappa_beta),
                          alpha_eta=self.alpha_eta.copy(), kappa_eta=self.kappa_eta.copy(),
                          alpha_xi=self.alpha_xi.copy(), kappa_xi=self.kappa_xi.copy())

    def shapes_valid(self) -> bool:
        pairs = [(self.alpha_beta, self.kappa_beta)]
        pairs += list(zip(self.alpha_eta, self.kappa_eta))
        pairs += list(zip(self.alpha_xi, self.kappa_xi))
        return all(0 < a < k for a, k in pairs)

    def is_finite(self) -> bool:
        parts = [self.beta, self.eta, self.alpha_eta, self.kappa_eta,
                 self.alpha_xi, self.kappa_xi, [self.alpha_beta, self.kappa_beta]]
        parts += list(self.xi)
        return all(np.all(np.isfinite(np.asarray(x, float))) for x in parts)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.beta, self.eta.ravel(),
                               [self.alpha_beta, self.kappa_beta],
                               self.alpha_eta, self.kappa_eta,
                               self.alpha_xi, self.kappa_xi])

    def flat_names(self) -> list:
        T, r = self.eta.shape
        names = [f"beta_{j}" for j in range(self.beta.size)]
        names += [f"eta_{t}_{j}" for t in range(T) for j in range(r)]
        names += ["alpha_beta", "kappa_beta"]
        for key in ("alpha_eta", "kappa_eta", "alpha_xi", "kappa_xi"):
            names += [f"{key}_{t}" for t in range(T)]
        return names


# --------------------------------------------------------------- the model

def _log_gamma_density(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


@dataclass
class TimeSlice:
    """Observed-row quantities at one time point."""

    rows: np.ndarray          # prediction-grid rows observed at t
    y: np.ndarray             # counts for categories k < K-1
    n: np.ndarray             # remaining trials
    delta: np.ndarray
    eps_prior: np.ndarray     # offset carried by the sigma-scaled prior rows
    eps_lik: np.ndarray       # offset folded into the first likelihood block
    X: np.ndarray
    Phi: np.ndarray

    @property
    def has_trials(self) -> np.ndarray:
        return self.n > 0


class MnStmModel:
    """Assembled MN-STM: data model, process models and parameter models.

    Latent logits on observed rows are nu_t = X_t beta + Phi_t eta_t + xi_t.
    """

    def __init__(self, panel: CountPanel, basis: BasisSystem, spec: MnStmSpec):
        if basis.T != panel.T:
            raise ValueError(f"basis has {basis.T} time points, panel has {panel.T}")
        grid = (panel.K - 1) * panel.N
        for t in range(panel.T):
            if basis.X_P[t].shape[0] != grid or basis.Phi_P[t].shape[0] != grid:
                raise ValueError(f"basis at t={t} must have {grid} prediction rows")
            if not np.array_equal(np.asarray(basis.obs_rows[t]), panel.obs_rows(t)):
                raise ValueError(f"basis observed rows at t={t} disagree with the panel mask")
            if basis.V[t].shape != (basis.r, basis.r) or basis.M[t].shape != (basis.r, basis.r):
                raise ValueError(f"M/V at t={t} must be {basis.r}x{basis.r}")
        self.panel = panel
        self.basis = basis
        self.spec = spec
        self.K, self.N, self.T = panel.K, panel.N, panel.T
        self.p = basis.p
        self.r = basis.r
        n_all = panel.remaining_trials()
        delta_all = None
        if spec.delta is not None:
            delta_all = np.asarray(spec.delta, dtype=float)
            if delta_all.shape != (panel.n,):
                raise ValueError(f"delta must have length n={panel.n}")
        self.slices = []
        offset = 0
        s, rho = spec.sigma, spec.rho
        for t in range(self.T):
            units = panel.observed_units(t)
            y = panel.counts[: self.K - 1][:, units, t].ravel().astype(float)
            n = n_all[:, units, t].ravel().astype(float)
            if delta_all is None:
                delta = np.maximum(n, spec.delta_floor)
            else:
                delta = delta_all[offset: offset + y.size]
            offset += y.size
            if spec.eps_scheme == "split":
                eps1 = np.full(y.size, spec.eps / 2.0)
                eps2 = np.full(y.size, spec.eps / 2.0)
            else:
                eps1 = np.full(y.size, spec.eps)
                eps2 = s * rho * y - (1 - rho) * y / s + spec.eps * s
            eps_prior = eps1 + eps2
            if np.any(eps_prior <= 0) or np.any(eps2 + (1 - rho) * y <= 0):
                raise ValueError("offsets are not strictly positive for this sigma/rho")
            if np.any(delta <= eps_prior / s):
                raise ValueError("delta must exceed eps/sigma on every row")
            self.slices.append(TimeSlice(rows=panel.obs_rows(t), y=y, n=n, delta=delta,
                                         eps_prior=eps_prior, eps_lik=eps1,
                                         X=basis.X[t], Phi=basis.Phi[t]))

    # -- state helpers -----------------------------------------------------

    def initial_state(self) -> ChainState:
        return ChainState(beta=np.zeros(self.p), eta=np.zeros((self.T, self.r)),
                          xi=[np.zeros(sl.y.size) for sl in self.slices])

    def eta_innovation(self, state: ChainState, t: int, eta_t=None) -> np.ndarray:
        """eta_t - M_t eta_{t-1}, with eta_0 = 0."""
        e = state.eta[t] if eta_t is None else eta_t
        if t == 0:
            return e
        return e - self.basis.M[t] @ state.eta[t - 1]

    def logits(self, state: ChainState, t: int) -> np.ndarray:
        sl = self.slices[t]
        return sl.X @ state.beta + sl.Phi @ state.eta[t] + state.xi[t]

    def prediction_logits(self, state: ChainState, t: int, xi_full=None) -> np.ndarray:
        """Logits on the full (K-1)N prediction grid at time t."""
        b = self.basis
        nu = b.X_P[t] @ state.beta + b.Phi_P[t] @ state.eta[t]
        if xi_full is not None:
            nu = nu + xi_full
        else:
            nu = nu.copy()
            nu[self.slices[t].rows] += state.xi[t]
        return nu

    # -- log densities -----------------------------------------------------

    def data_loglik(self, state: ChainState) -> float:
        """Sum of binomial factors over observed cells (constants included)."""
        total = 0.0
        for t, sl in enumerate(self.slices):
            nu = self.logits(state, t)
            comb = gammaln(sl.n + 1) - gammaln(sl.y + 1) - gammaln(sl.n - sl.y + 1)
            total += float(np.sum(comb + sl.y * nu - sl.n * softplus(nu)))
        return total

    def _mlb_level(self, H, arg, alpha, kappa):
        # conditional MLB log-kernel at location zero plus its beta constants
        const = np.sum(gammaln(kappa) - gammaln(alpha) - gammaln(kappa - alpha))
        return const + conditional_mlb_logkernel(arg, np.zeros(H.shape[0]), H, alpha, kappa)

    def _prior_rows(self, sl):
        return sl.eps_prior / self.spec.sigma, sl.delta

    def logprior_beta(self, state: ChainState) -> float:
        if self.p == 0:
            return 0.0
        s = self.spec.sigma
        X = np.vstack([sl.X for sl in self.slices])
        a = np.concatenate([self._prior_rows(sl)[0] for sl in self.slices])
        k = np.concatenate([sl.delta for sl in self.slices])
        H = np.vstack([s * X, np.eye(self.p)])
        alpha = np.concatenate([a, np.full(self.p, state.alpha_beta)])
        kappa = np.concatenate([k, np.full(self.p, state.kappa_beta)])
        return self._mlb_level(H, state.beta, alpha, kappa)

    def logprior_eta(self, state: ChainState, t: int) -> float:
        if self.r == 0:
            return 0.0
        sl = self.slices[t]
        s = self.spec.sigma
        a, k = self._prior_rows(sl)
        H = np.vstack([s * sl.Phi, self.basis.V[t]])
        alpha = np.concatenate([a, np.full(self.r, state.alpha_eta[t])])
        kappa = np.concatenate([k, np.full(self.r, state.kappa_eta[t])])
        return self._mlb_level(H, self.eta_innovation(state, t), alpha, kappa)

    def logprior_xi(self, state: ChainState, t: int) -> float:
        sl = self.slices[t]
        m = sl.y.size
        if m == 0:
            return 0.0
        s = self.spec.sigma
        a, k = self._prior_rows(sl)
        z1 = s * state.xi[t]
        z2 = state.xi[t]
        ax, kx = state.alpha_xi[t], state.kappa_xi[t]
        out = np.sum(gammaln(k) - gammaln(a) - gammaln(k - a) + a * z1 - k * softplus(z1))
        out += m * (gammaln(kx) - gammaln(ax) - gammaln(kx - ax))
        out += np.sum(ax * z2 - kx * softplus(z2))
        return float(out)

    def logprior_shapes(self, state: ChainState) -> float:
        """Gamma priors with the joint truncation kappa > alpha."""
        if not state.shapes_valid():
            return -np.inf
        sp = self.spec
        g = _log_gamma_density
        out = g(state.alpha_beta, sp.a_beta_1, sp.tau_beta_1)
        out += g(state.kappa_beta, sp.a_beta, sp.tau_beta)
        out += np.sum(g(state.alpha_eta, sp.a_eta_1, sp.tau_eta_1))
        out += np.sum(g(state.kappa_eta, sp.a_eta, sp.tau_eta))
        out += np.sum(g(state.alpha_xi, sp.a_xi_1, sp.tau_xi_1))
        out += np.sum(g(state.kappa_xi, sp.a_xi, sp.tau_xi))
        return float(out)

    def log_joint(self, state: ChainState) -> float:
        shapes = self.logprior_shapes(state)
        if not np.isfinite(shapes):
            return -np.inf
        out = self.data_loglik(state) + self.logprior_beta(state) + shapes
        for t in range(self.T):
            out += self.logprior_eta(state, t) + self.logprior_xi(state, t)
        return float(out)

    def with_spec(self, **changes) -> "MnStmModel":
        return MnStmModel(self.panel, self.basis, replace(self.spec, **changes))


def assemble_mnstm(panel: CountPanel, basis: BasisSystem, spec: MnStmSpec | None = None) -> MnStmModel:
    return MnStmModel(panel, basis, spec or MnStmSpec())


def latent_to_probability(state: ChainState, basis: BasisSystem, cell, xi_value=None) -> float:
    """Inverse logit of x'beta + phi'eta_t + xi at prediction cell (k, i, t).

    ``xi_value`` overrides the fine-scale term; when omitted it is taken from
    the state if the cell is observed and zero otherwise.
    """
    k, i, t = cell
    row = k * basis.n_units + i
    nu = basis.X_P[t][row] @ state.beta + basis.Phi_P[t][row] @ state.eta[t]
    if xi_value is None:
        hit = np.flatnonzero(np.asarray(basis.obs_rows[t]) == row)
        xi_value = state.xi[t][hit[0]] if hit.size else 0.0
    return float(sigmoid(nu + xi_value))

