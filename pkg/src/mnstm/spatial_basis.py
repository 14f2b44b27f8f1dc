"""Moran's I basis functions, propagators, stability checks and precision factors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mlb_dist import _fix_signs
from .special import digamma, trigamma  # noqa: F401  (re-exported)


class MoranBasisWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Adjacency:
    """Symmetric 0/1 neighbour matrix with zero diagonal."""

    matrix: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(A, A.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ValueError("adjacency must have a zero diagonal")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError("adjacency entries must be 0 or 1")
        object.__setattr__(self, "matrix", A)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Adjacency":
        A = np.zeros((n_nodes, n_nodes))
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            A[i, j] = A[j, i] = 1.0
        return cls(A)

    def replicate(self, n_layers: int) -> "Adjacency":
        """Block-diagonal copy over category layers (no cross-layer edges)."""
        return Adjacency(np.kron(np.eye(n_layers), self.matrix))


def _as_matrix(A):
    return A.matrix if isinstance(A, Adjacency) else np.asarray(A, dtype=float)


def column_basis(X, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis for col(X), dropping null or collinear directions."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] == 0:
        return X.reshape(X.shape[0], 0)
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    keep = s > tol * max(s.max(), 1.0)
    return U[:, keep]


def _complement_projector(X, check_rank=True):
    n = X.shape[0]
    if X.shape[1] == 0:
        return np.eye(n)
    if check_rank and np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("covariate matrix is rank deficient")
    Q, _ = np.linalg.qr(X)
    return np.eye(n) - Q @ Q.T


def moran_operator(X, A) -> np.ndarray:
    """(I - P_X) A (I - P_X) with P_X the orthogonal projector onto col(X)."""
    A = _as_matrix(A)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != A.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but A is {A.shape[0]}-square")
    P = _complement_projector(X)
    out = P @ A @ P
    return 0.5 * (out + out.T) if np.allclose(A, A.T) else out


def _sorted_eig(S):
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


def mi_basis(X_P, A, r: int, return_eigenvalues: bool = False):
    """Top-r eigenvectors of the Moran operator, descending eigenvalue.

    Warns (``MoranBasisWarning``) when r exceeds the count of strictly
    positive eigenvalues but still returns r columns.
    """
    S = moran_operator(X_P, A)
    n = S.shape[0]
    if r > n:
        raise ValueError(f"r={r} exceeds operator size {n}")
    vals, vecs = _sorted_eig(S)
    n_pos = int(np.sum(vals > 1e-10 * max(1.0, np.abs(vals).max())))
    if r > n_pos:
        warnings.warn(f"r={r} exceeds the {n_pos} positive Moran eigenvalues",
                      MoranBasisWarning, stacklevel=2)
    Phi = vecs[:, :r]
    if return_eigenvalues:
        return Phi, vals
    return Phi


def eigen_energy_fraction(eigenvalues, r: int) -> float:
    """Share of the operator's squared Frobenius norm carried by the top r eigenvalues."""
    lam = np.asarray(eigenvalues, dtype=float)
    total = np.sum(lam ** 2)
    if total == 0:
        return 0.0
    return float(np.sum(lam[:r] ** 2) / total)


def complement_basis(X, r: int) -> np.ndarray:
    """First r columns of an orthonormal basis of col(X)^perp (via full QR)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    Q, _ = np.linalg.qr(X, mode="complete")
    B = _fix_signs(Q[:, p:])
    if r > B.shape[1]:
        raise ValueError(f"only {B.shape[1]} complement directions available")
    return B[:, :r]


def mi_propagator(Phi_t_P, X_t_P, U_t=None, r: int | None = None) -> np.ndarray:
    """Moran's I propagator (r x r, orthonormal).

    The columns of G = Phi' X (r x p) play the role of the covariate space
    inside an r-dimensional Moran operator (I - P_G) U (I - P_G); all r
    eigenvectors are returned sorted by descending eigenvalue.  With no
    covariates the operator collapses and the identity is returned with a
    warning.
    """
    Phi = np.atleast_2d(np.asarray(Phi_t_P, dtype=float))
    X = np.atleast_2d(np.asarray(X_t_P, dtype=float))
    if X.shape[0] != Phi.shape[0]:
        raise ValueError("Phi and X must have the same number of rows")
    rr = Phi.shape[1]
    if r is not None and r != rr:
        raise ValueError(f"r={r} disagrees with Phi's {rr} columns")
    U = np.eye(rr) if U_t is None else np.asarray(U_t, dtype=float)
    if U.shape != (rr, rr):
        raise ValueError(f"U must be {rr}x{rr}")
    if not np.any(U):
        raise ValueError("U is identically zero; the propagator is undefined")
    if X.shape[1] == 0:
        warnings.warn("no covariates: propagator defaults to the identity",
                      MoranBasisWarning, stacklevel=2)
        return np.eye(rr)
    G = column_basis(Phi.T @ X)
    P = np.eye(rr) - G @ G.T
    S = P @ U @ P
    _, vecs = _sorted_eig(S)
    return vecs


@dataclass
class StabilityReport:
    rho: float
    partial_sums: np.ndarray
    terms: np.ndarray
    limit: float
    converged: bool
    tolerance: float


def stability_analysis(Psi_seq, rho: float, horizon: int,
                       tolerance: float = 1e-6) -> StabilityReport:
    """Partial sums of trace(B_j' B_j) for B_j = prod_{i<j} rho Psi_i, B_0 = I.

    Psi_seq is cycled when shorter than the horizon.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1) for a stable VAR(1)")
    Psi_seq = [np.asarray(P, dtype=float) for P in Psi_seq]
    if not Psi_seq:
        raise ValueError("need at least one propagator")
    r = Psi_seq[0].shape[0]
    B = np.eye(r)
    terms = np.empty(horizon)
    for j in range(horizon):
        terms[j] = np.sum(B * B)
        B = B @ (rho * Psi_seq[j % len(Psi_seq)])
    partial = np.cumsum(terms)
    limit = r / (1.0 - rho ** 2)
    return StabilityReport(rho=rho, partial_sums=partial, terms=terms, limit=limit,
                           converged=bool(abs(partial[-1] - limit) < tolerance),
                           tolerance=tolerance)


def positive_approximant(C) -> np.ndarray:
    """Frobenius-nearest PSD matrix: symmetrize then clip eigenvalues at 0."""
    C = np.asarray(C, dtype=float)
    S = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def solve_precision_factor(Phi_P, Phi, P, alpha_t: float, kappa_t: float):
    """Precision factor V with V'V = A+(Phi_P' P Phi_P - Phi' Phi).

    Returns ``(V, sigma_eta_sq)`` where sigma_eta_sq is the logit-beta
    variance trigamma(alpha) + trigamma(kappa - alpha).  V does not depend on
    the shapes once the variance is matched.
    """
    if not (alpha_t > 0 and kappa_t > alpha_t):
        raise ValueError("need kappa_t > alpha_t > 0")
    Phi_P = np.atleast_2d(np.asarray(Phi_P, dtype=float))
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    P = np.asarray(P, dtype=float)
    sigma_sq = float(trigamma(alpha_t) + trigamma(kappa_t - alpha_t))
    C = Phi_P.T @ P @ Phi_P - Phi.T @ Phi
    S = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(S)
    lam = np.maximum(vals, 0.0)
    V = np.sqrt(lam)[:, None] * vecs.T
    return V, sigma_sq


def precision_objective(V, Phi_P, Phi, P) -> float:
    """||P - Phi_P (Phi'Phi + V'V) Phi_P'||_F^2 at a candidate V."""
    Phi_P = np.atleast_2d(np.asarray(Phi_P, dtype=float))
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    R = P - Phi_P @ (Phi.T @ Phi + V.T @ V) @ Phi_P.T
    return float(np.sum(R * R))


def propagated_covariance(M_seq, cov_start, steps: int):
    """cov(eta_{d+steps}, eta_d) = (M_{d+steps} ... M_{d+1}) cov(eta_d)."""
    C = np.asarray(cov_start, dtype=float)
    prod = np.eye(C.shape[0])
    for M in list(M_seq)[:steps]:
        prod = np.asarray(M) @ prod
    return prod @ C


# ---------------------------------------------------------------- assembly

@dataclass
class BasisSystem:
    """Per-time covariates, basis functions, propagators and precision factors.

    Prediction-grid rows are category-major: row k*N + i for category
    k < K-1 and unit i.  ``obs_rows[t]`` selects the observed rows at time t.
    """

    X_P: list
    Phi_P: list
    M: list
    V: list
    obs_rows: list
    r: int
    n_layers: int = 1
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.X_P)
        for name in ("Phi_P", "M", "V", "obs_rows"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} must have one entry per time point")
        self.X = [Xp[rows] for Xp, rows in zip(self.X_P, self.obs_rows)]
        self.Phi = [Pp[rows] for Pp, rows in zip(self.Phi_P, self.obs_rows)]

    @property
    def T(self) -> int:
        return len(self.X_P)

    @property
    def n_units(self) -> int:
        return self.X_P[0].shape[0] // self.n_layers

    @property
    def p(self) -> int:
        return self.X_P[0].shape[1]

    def check(self, tol_orth=1e-10, tol_conf=1e-8):
        for t in range(self.T):
            Pp = self.Phi_P[t]
            if Pp.shape[1] != self.r:
                raise ValueError("basis width disagrees with r")
            if not np.allclose(Pp.T @ Pp, np.eye(self.r), atol=tol_orth):
                raise ValueError(f"basis at t={t} is not orthonormal")
            if self.X_P[t].shape[1] and \
                    np.abs(Pp.T @ self.X_P[t]).max() > tol_conf * max(1.0, np.abs(self.X_P[t]).max()):
                raise ValueError(f"basis at t={t} is confounded with covariates")


def build_moran_basis_system(X_P_seq, adjacency_units, obs_rows, r: int,
                             n_layers: int, P=None, damping: float | None = None,
                             t_star: int | None = None,
                             propagator_weight=None) -> BasisSystem:
    """Moran basis + propagator + precision factor for every time point.

    ``adjacency_units`` is the N x N unit adjacency which is replicated over
    the ``n_layers`` = K-1 category layers.  P defaults to I - A of the
    replicated adjacency.  When ``damping`` is given, propagators after
    ``t_star`` (1-based, default T) are multiplied by it.
    """
    A_units = adjacency_units if isinstance(adjacency_units, Adjacency) \
        else Adjacency(adjacency_units)
    A = A_units.replicate(n_layers).matrix
    if P is None:
        P = np.eye(A.shape[0]) - A
    T = len(X_P_seq)
    t_star = T if t_star is None else t_star
    cache = {}
    Phi_P, M, V, energy = [], [], [], []
    for t in range(T):
        Xp = np.asarray(X_P_seq[t], dtype=float)
        Xb = column_basis(Xp)
        key = Xb.round(12).tobytes()
        if key not in cache:
            with warnings.catch_warnings(record=True) as rec:
                warnings.simplefilter("always")
                Phi_t, vals = mi_basis(Xb, A, r, return_eigenvalues=True)
            cache[key] = (Phi_t, eigen_energy_fraction(vals, r), [str(w.message) for w in rec])
        Phi_t, frac, warn_msgs = cache[key]
        Phi_P.append(Phi_t)
        energy.append(frac)
        if t == 0:
            M.append(np.zeros((r, r)))
        else:
            Mt = mi_propagator(Phi_t, Xp, propagator_weight)
            if damping is not None and t + 1 > t_star:
                Mt = damping * Mt
            M.append(Mt)
        Vt, _ = solve_precision_factor(Phi_t, Phi_t[obs_rows[t]], P, 1.0, 2.0)
        V.append(Vt)
    info = {"basis": "moran", "energy_fraction": energy,
            "warnings": sorted({m for v in cache.values() for m in v[2]})}
    return BasisSystem(X_P=[np.asarray(x, float) for x in X_P_seq], Phi_P=Phi_P,
                       M=M, V=V, obs_rows=[np.asarray(o) for o in obs_rows],
                       r=r, n_layers=n_layers, info=info)


def build_static_basis_system(X, r: int, Phi=None, n_layers: int = 1,
                              obs_rows=None) -> BasisSystem:
    """T=1 system with identity precision factor.

    Phi defaults to the first r columns of the orthogonal complement of X and
    every row is observed unless ``obs_rows`` says otherwise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Phi is None:
        Phi = complement_basis(X, r)
    rows = np.arange(X.shape[0]) if obs_rows is None else np.asarray(obs_rows)
    return BasisSystem(X_P=[X], Phi_P=[np.asarray(Phi, float)], M=[np.zeros((r, r))],
                       V=[np.eye(r)], obs_rows=[rows], r=r, n_layers=n_layers,
                       info={"basis": "complement"})
