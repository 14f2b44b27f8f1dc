"""Logit-beta and multivariate logit-beta (MLB) distributions.

Covers densities, the least-squares marginal sampler for the conditional
MLB family, and a truncated-series Polya-Gamma sampler used to check the
normal-mixture representation of the logistic kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln


class ParameterDomainError(ValueError):
    """Raised when shape or dimension arguments fall outside their domain."""


def softplus(x):
    """Overflow-safe log(1 + exp(x))."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Overflow-safe inverse logit."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _check_shapes(alpha, kappa):
    alpha = np.asarray(alpha, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if alpha.shape != kappa.shape:
        raise ParameterDomainError(
            f"shape vectors differ in size: {alpha.shape} vs {kappa.shape}")
    if not np.all(np.isfinite(alpha)) or not np.all(np.isfinite(kappa)):
        raise ParameterDomainError("shape parameters must be finite")
    if np.any(alpha <= 0):
        raise ParameterDomainError(
            f"alpha must be > 0 (min {alpha.min() if alpha.size else 'n/a'})")
    gap = kappa - alpha
    if np.any(gap <= 0):
        bad = int(np.argmin(gap))
        raise ParameterDomainError(
            f"kappa must exceed alpha elementwise (index {bad}: "
            f"alpha={alpha.flat[bad]!r}, kappa={kappa.flat[bad]!r})")
    return alpha, kappa


@dataclass(frozen=True)
class LogitBetaParams:
    alpha: float
    kappa: float

    def __post_init__(self):
        _check_shapes(self.alpha, self.kappa)

    @property
    def mean(self) -> float:
        from .special import digamma
        return float(digamma(self.alpha) - digamma(self.kappa - self.alpha))

    @property
    def variance(self) -> float:
        from .special import trigamma
        return float(trigamma(self.alpha) + trigamma(self.kappa - self.alpha))


@dataclass
class MlbParams:
    """Location, precision factor and shapes of an MLB law.

    In the joint form ``precision_factor`` is an invertible M x M matrix V and
    q = mu + V^{-1} w.  In the conditional form it is an M x r matrix H of full
    column rank and ``c`` holds the location of the kernel
    alpha'(H q1 - c) - kappa' softplus(H q1 - c).
    """

    mu: np.ndarray
    precision_factor: np.ndarray
    alpha_vec: np.ndarray
    kappa_vec: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.precision_factor = np.atleast_2d(
            np.asarray(self.precision_factor, dtype=float))
        self.alpha_vec, self.kappa_vec = _check_shapes(
            np.atleast_1d(self.alpha_vec), np.atleast_1d(self.kappa_vec))
        m = self.precision_factor.shape[0]
        if self.alpha_vec.shape != (m,):
            raise ParameterDomainError(
                f"shape vectors must have length {m}, got {self.alpha_vec.shape}")
        if self.c is not None:
            self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
            if self.c.shape != (m,):
                raise ParameterDomainError("c must have one entry per row")
        if self.precision_factor.shape[1] == m and self.mu.shape != (m,):
            raise ParameterDomainError("mu must have length M")


@dataclass(frozen=True)
class PolyaGammaParams:
    b: float
    truncation: int = 200

    def __post_init__(self):
        if not self.b > 0:
            raise ParameterDomainError("b must be > 0")
        if int(self.truncation) < 1:
            raise ParameterDomainError("truncation must be >= 1")


# ---------------------------------------------------------------- logit-beta

def log_gamma_variates(shape, rng: np.random.Generator, size=None):
    """log G for G ~ Gamma(shape, 1), stable for small shapes.

    Uses G(a) = G(a + 1) U^{1/a} when a < 1 so that tiny shapes never
    underflow to log(0).
    """
    shape = np.asarray(shape, dtype=float)
    if size is None:
        size = shape.shape
    shape = np.broadcast_to(shape, size)
    small = shape < 1.0
    boosted = np.where(small, shape + 1.0, shape)
    out = np.log(rng.standard_gamma(boosted, size=size))
    if np.any(small):
        u = rng.random(size=size)
        # only the small entries get the power correction; u is drawn for all
        # entries so the stream is independent of which entries are small
        corr = np.log(u) / np.where(small, shape, 1.0)
        out = out + np.where(small, corr, 0.0)
    return out


def logit_beta_variates(alpha, kappa, rng: np.random.Generator, size=None):
    """Independent logit-beta draws log(G1) - log(G2) with G1 ~ Ga(alpha), G2 ~ Ga(kappa - alpha)."""
    alpha, kappa = _check_shapes(alpha, kappa)
    if size is None:
        size = alpha.shape
    return (log_gamma_variates(alpha, rng, size)
            - log_gamma_variates(kappa - alpha, rng, size))


def logit_beta_sample(params: LogitBetaParams, n: int, rng_seed) -> np.ndarray:
    if n < 1:
        raise ParameterDomainError("n must be >= 1")
    rng = _as_rng(rng_seed)
    return logit_beta_variates(params.alpha, params.kappa, rng, size=(int(n),))


def _log_beta_const(alpha, kappa):
    return gammaln(kappa) - gammaln(alpha) - gammaln(kappa - alpha)


def logit_beta_logpdf(q, params: LogitBetaParams):
    q = np.asarray(q, dtype=float)
    a, k = params.alpha, params.kappa
    out = _log_beta_const(a, k) + a * q - k * softplus(q)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------- MLB

def mlb_logpdf(q, params: MlbParams) -> float:
    V = params.precision_factor
    if V.shape[0] != V.shape[1]:
        raise ParameterDomainError("joint MLB density needs a square precision factor")
    q = np.atleast_1d(np.asarray(q, dtype=float))
    sign, logdet = np.linalg.slogdet(V)
    if sign == 0 or not np.isfinite(logdet):
        raise np.linalg.LinAlgError("precision factor is singular")
    z = V @ (q - params.mu)
    a, k = params.alpha_vec, params.kappa_vec
    return float(logdet + np.sum(_log_beta_const(a, k)) + a @ z - k @ softplus(z))


def conditional_mlb_logkernel(q1, c, H, alpha_vec, kappa_vec) -> float:
    """alpha'(H q1 - c) - kappa' softplus(H q1 - c), unnormalized."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    q1 = np.atleast_1d(np.asarray(q1, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    alpha_vec = np.atleast_1d(np.asarray(alpha_vec, dtype=float))
    kappa_vec = np.atleast_1d(np.asarray(kappa_vec, dtype=float))
    m, r = H.shape
    if q1.shape != (r,) or c.shape != (m,) or alpha_vec.shape != (m,) \
            or kappa_vec.shape != (m,):
        raise ParameterDomainError(
            f"dimension mismatch: H {H.shape}, q1 {q1.shape}, c {c.shape}, "
            f"alpha {alpha_vec.shape}, kappa {kappa_vec.shape}")
    z = H @ q1 - c
    return float(alpha_vec @ z - kappa_vec @ softplus(z))


def null_space_basis(H) -> np.ndarray:
    """Orthonormal basis of the null space of H' from a full QR of H.

    Columns are signed so that the first entry with magnitude above 1e-12 is
    positive.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    m, r = H.shape
    Q, _ = np.linalg.qr(H, mode="complete")
    B = Q[:, r:]
    return _fix_signs(B)


def _fix_signs(B, tol=1e-12):
    B = np.array(B, dtype=float, copy=True)
    for j in range(B.shape[1]):
        nz = np.flatnonzero(np.abs(B[:, j]) > tol)
        if nz.size and B[nz[0], j] < 0:
            B[:, j] = -B[:, j]
    return B


class LeastSquaresMap:
    """Precomputed (H'H)^{-1}H' applied through a thin QR of H.

    Raises ``np.linalg.LinAlgError`` with the condition number when H has
    numerically lost column rank.
    """

    def __init__(self, H, rcond: float = 1e-10):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        m, r = H.shape
        if r > m:
            raise ParameterDomainError(f"H has more columns ({r}) than rows ({m})")
        self.shape = H.shape
        if r == 0:
            self._Q = np.zeros((m, 0))
            self._R = np.zeros((0, 0))
            return
        Q, R = linalg.qr(H, mode="economic")
        d = np.abs(np.diag(R))
        cond = np.inf if d.min() == 0 else d.max() / d.min()
        if not np.isfinite(cond) or d.min() <= rcond * d.max():
            s = np.linalg.svd(H, compute_uv=False)
            cond = np.inf if s[-1] == 0 else s[0] / s[-1]
            raise np.linalg.LinAlgError(
                f"H lacks full column rank (condition number {cond:.3e})")
        self._Q = Q
        self._R = R

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        if self.shape[1] == 0:
            return np.zeros((0,) + b.shape[1:])
        return linalg.solve_triangular(self._R, self._Q.T @ b, lower=False)


def marginal_mlb_sample(H_star, mu_star, alpha_star, kappa_star, n: int,
                        rng_seed) -> np.ndarray:
    """Draw q1 = (H'H)^{-1}H'(mu + w), w independent logit-beta.

    This is the q1-marginal of the joint MLB whose precision factor is the
    square matrix (H, B) with B spanning the null space of H'.  Returns an
    (n, r) array.
    """
    H_star = np.atleast_2d(np.asarray(H_star, dtype=float))
    mu_star = np.atleast_1d(np.asarray(mu_star, dtype=float))
    alpha_star, kappa_star = _check_shapes(np.atleast_1d(alpha_star),
                                           np.atleast_1d(kappa_star))
    m, r = H_star.shape
    if mu_star.shape != (m,) or alpha_star.shape != (m,):
        raise ParameterDomainError("H, mu, alpha, kappa sizes disagree")
    if n < 1:
        raise ParameterDomainError("n must be >= 1")
    lsq = LeastSquaresMap(H_star)
    rng = _as_rng(rng_seed)
    w = logit_beta_variates(alpha_star[:, None], kappa_star[:, None], rng,
                            size=(m, int(n)))
    return lsq(mu_star[:, None] + w).T


def marginal_mlb_logpdf_quadrature(q1_grid, H, mu, alpha, kappa,
                                   half_width: float = 40.0,
                                   n_nodes: int = 401) -> np.ndarray:
    """Brute-force q1-marginal density of the joint MLB with factor (H, B).

    Integrates the joint density over q2 on a tensor trapezoid grid.  Only
    practical when M - r <= 2.  Returns log densities on ``q1_grid`` (r=1).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    m, r = H.shape
    if r != 1 or m - r > 2:
        raise ParameterDomainError("quadrature oracle supports r=1, M<=3")
    B = null_space_basis(H)
    V = np.hstack([H, B])
    _, logdet = np.linalg.slogdet(V)
    alpha = np.asarray(alpha, float)
    kappa = np.asarray(kappa, float)
    const = logdet + np.sum(_log_beta_const(alpha, kappa))
    nodes = np.linspace(-half_width, half_width, n_nodes)
    step = nodes[1] - nodes[0]
    grids = np.meshgrid(*([nodes] * (m - r)), indexing="ij")
    q2 = np.stack([g.ravel() for g in grids], axis=1)  # (G, m - r)
    weights = np.ones(n_nodes)
    weights[[0, -1]] = 0.5
    wgrid = weights
    for _ in range(m - r - 1):
        wgrid = np.multiply.outer(wgrid, weights)
    logw = np.log(wgrid.ravel() * step ** (m - r))
    base = q2 @ B.T - mu  # (G, m)
    out = []
    for q in np.atleast_1d(q1_grid):
        z = base + H[:, 0] * q
        ll = z @ alpha - softplus(z) @ kappa + logw
        mx = ll.max()
        out.append(const + mx + np.log(np.exp(ll - mx).sum()))
    return np.array(out)


# ------------------------------------------------------------- Polya-Gamma

def polya_gamma_truncation_bound(b: float, truncation: int) -> float:
    """Expected mass dropped by truncating the series after ``truncation`` terms.

    E[omega_full - omega_trunc] = b/(2 pi^2) * sum_{k > K} 1/(k - 1/2)^2
    which is at most b / (2 pi^2 (K - 1/2)).
    """
    return b / (2.0 * np.pi ** 2 * (truncation - 0.5))


def polya_gamma_sample(params: PolyaGammaParams, n: int, rng_seed,
                       chunk: int = 20000) -> np.ndarray:
    """Truncated sum-of-gammas draws of PG(b, 0).

    omega = 1/(2 pi^2) * sum_{k <= K} g_k / (k - 1/2)^2 with g_k ~ Gamma(b, 1).
    """
    rng = _as_rng(rng_seed)
    K = int(params.truncation)
    denom = (np.arange(1, K + 1) - 0.5) ** 2
    scale = 1.0 / (2.0 * np.pi ** 2)
    out = np.empty(int(n))
    for start in range(0, int(n), chunk):
        stop = min(start + chunk, int(n))
        g = rng.standard_gamma(params.b, size=(stop - start, K))
        out[start:stop] = scale * (g / denom).sum(axis=1)
    return out


def pg_identity_sides(a, b, h, omega):
    """Left and right sides of the logistic/normal-mixture identity.

    lhs = exp(a h) / (1 + exp(h))^b
    rhs = 2^{-b} exp((a - b/2) h) E[exp(-omega h^2 / 2)] using draws ``omega``.
    """
    lhs = np.exp(a * h - b * softplus(h))
    rhs = 2.0 ** (-b) * np.exp((a - b / 2.0) * h) * np.mean(np.exp(-omega * h * h / 2.0))
    return float(lhs), float(rhs)


def verify_pg_identity(a: float, b: float, h: float, n_mc: int, rng_seed,
                       truncation: int = 200) -> float:
    """Relative error |lhs - rhs| / lhs of the mixture identity."""
    if not b > 0:
        raise ParameterDomainError("b must be > 0")
    omega = polya_gamma_sample(PolyaGammaParams(b, truncation), n_mc, rng_seed)
    lhs, rhs = pg_identity_sides(a, b, h, omega)
    return abs(lhs - rhs) / lhs
