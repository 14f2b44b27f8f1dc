"""Synthetic panels: the static sine-covariate design and a desk-scale MN-STM surrogate."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mlb_dist import sigmoid
from .model import CountPanel, stick_break_inverse
from .spatial_basis import (Adjacency, column_basis, complement_basis, mi_basis)


@dataclass
class SimDesign:
    variant: str = "empirical_mnstm"
    N: int | None = None
    K: int | None = None
    T: int | None = None
    r: int | None = None
    observed_fraction: float | None = None
    total_low: int = 50
    total_high: int = 50
    beta: tuple = (0.01, -2.0)
    eta_sd: float = 1.0
    xi_var: float = 0.33
    grid_shape: tuple | None = None

    def __post_init__(self):
        if self.variant == "appendix_b_static":
            defaults = dict(N=50, K=5, T=1, r=125, observed_fraction=1.0)
        elif self.variant == "empirical_mnstm":
            defaults = dict(N=30, K=3, T=10, r=10, observed_fraction=0.65)
            if self.total_low == 50 and self.total_high == 50:
                self.total_low, self.total_high = 100, 600
        else:
            raise ValueError(f"unknown design {self.variant!r}")
        for k, v in defaults.items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if not 0 < self.observed_fraction <= 1:
            raise ValueError("observed fraction must lie in (0, 1]")
        if min(self.N, self.K, self.T, self.r) < 1 or self.K < 2:
            raise ValueError("dimensions must be positive (K >= 2)")
        if not 0 < self.total_low <= self.total_high:
            raise ValueError("need 0 < total_low <= total_high")


@dataclass
class SimulatedPanel:
    panel: CountPanel
    truth: np.ndarray          # K x N x T probabilities
    covariates: list           # per-t (K-1)N x p prediction covariates
    adjacency: Adjacency | None
    basis: np.ndarray | None   # fixed basis for the static design
    design: SimDesign
    extras: dict = field(default_factory=dict)


def smoothed_proportions(y, m):
    """(y + 1) / (m + K) per category."""
    y = np.asarray(y, dtype=float)
    K = y.shape[0]
    return (y + 1.0) / (np.asarray(m, dtype=float) + K)


def sine_covariates(N: int, K: int) -> np.ndarray:
    """(1, sin(pi (k i + (k-1) N) / N)) on category-major rows, k = 1..K-1, i = 1..N."""
    k = np.repeat(np.arange(1, K), N).astype(float)
    i = np.tile(np.arange(1, N + 1), K - 1).astype(float)
    g = np.column_stack([np.ones(k.size), np.sin(np.pi * (k * i + (k - 1) * N) / N)])
    return g


def orthonormalize(G) -> np.ndarray:
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))


def indicator_covariates(N: int, K: int, T: int) -> list:
    """Intercept, category indicators (k = 2..K-1) and time indicators (t = 2..T)."""
    out = []
    k = np.repeat(np.arange(K - 1), N)
    for t in range(T):
        cols = [np.ones(k.size)]
        cols += [(k == j).astype(float) for j in range(1, K - 1)]
        cols += [np.full(k.size, float(t == tau)) for tau in range(1, T)]
        out.append(np.column_stack(cols))
    return out


def lattice_adjacency(rows: int, cols: int) -> Adjacency:
    """Rook-neighbour adjacency on a rows x cols grid, row-major unit order."""
    edges = []
    for a in range(rows):
        for b in range(cols):
            u = a * cols + b
            if b + 1 < cols:
                edges.append((u, u + 1))
            if a + 1 < rows:
                edges.append((u, u + cols))
    return Adjacency.from_edges(rows * cols, edges)


def _grid_for(N):
    best = (1, N)
    for a in range(1, int(np.sqrt(N)) + 1):
        if N % a == 0:
            best = (a, N // a)
    return best


def _totals(design, rng, shape):
    return rng.integers(design.total_low, design.total_high + 1, size=shape)


def _draw_counts(pi, m, rng):
    K, N, T = pi.shape
    Y = np.zeros((K, N, T), dtype=np.int64)
    for t in range(T):
        for i in range(N):
            Y[:, i, t] = rng.multinomial(int(m[i, t]), pi[:, i, t] / pi[:, i, t].sum())
    return Y


def simulate_panel(design: SimDesign, seed: int) -> SimulatedPanel:
    rng = np.random.default_rng(seed)
    if design.variant == "appendix_b_static":
        return _simulate_static(design, rng)
    return _simulate_empirical(design, rng)


def _simulate_static(design, rng):
    N, K, r = design.N, design.K, design.r
    X = orthonormalize(sine_covariates(N, K))
    Phi = complement_basis(X, r)
    beta = np.asarray(design.beta, dtype=float)
    eta = rng.normal(0.0, design.eta_sd, size=r)
    xi = rng.normal(0.0, np.sqrt(design.xi_var), size=(K - 1) * N)
    nu = X @ beta + Phi @ eta + xi
    p = sigmoid(nu).reshape(K - 1, N)
    pi = stick_break_inverse(p)[:, :, None]
    m = _totals(design, rng, (N, 1))
    Y = _draw_counts(pi, m, rng)
    panel = CountPanel(Y, np.ones((N, 1), dtype=bool))
    return SimulatedPanel(panel=panel, truth=pi, covariates=[X], adjacency=None,
                          basis=Phi, design=design,
                          extras={"beta": beta, "eta": eta, "xi": xi, "totals": m})


def _simulate_empirical(design, rng):
    N, K, T = design.N, design.K, design.T
    rows, cols = design.grid_shape or _grid_for(N)
    A = lattice_adjacency(rows, cols)
    # smooth spatial fields from low-frequency Moran eigenvectors of the lattice
    X0 = np.ones((N, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        E = mi_basis(X0, A, min(6, N - 1))
    base_logit = np.empty((K - 1, N, T))
    level = rng.normal(0.0, 0.5, size=K - 1)
    time = np.linspace(0.0, 1.0, T)
    for k in range(K - 1):
        spatial = E @ rng.normal(0.0, 1.0, size=E.shape[1])
        drift = E @ rng.normal(0.0, 0.5, size=E.shape[1])
        trend = 0.3 * np.sin(2 * np.pi * time + rng.uniform(0, 2 * np.pi))
        base_logit[k] = (level[k] + spatial[:, None] + drift[:, None] * time[None, :]
                         + trend[None, :])
    base_pi = stick_break_inverse(sigmoid(base_logit))
    m = _totals(design, rng, (N, T))
    base = _draw_counts(base_pi, m, rng)
    truth = smoothed_proportions(base, m[None])
    Y = _draw_counts(truth, m, rng)
    n_obs = max(1, int(round(design.observed_fraction * N)))
    observed = np.zeros((N, T), dtype=bool)
    for t in range(T):
        observed[rng.choice(N, size=n_obs, replace=False), t] = True
    panel = CountPanel(Y, observed)
    return SimulatedPanel(panel=panel, truth=truth, covariates=indicator_covariates(N, K, T),
                          adjacency=A, basis=None, design=design,
                          extras={"totals": m, "base_counts": base})
