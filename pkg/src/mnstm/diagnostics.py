"""Effective sample size, median relative absolute error and interval coverage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EssReport:
    values: np.ndarray
    chain_length: int
    estimator: str
    degenerate: np.ndarray = None

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "chain_length": self.chain_length,
                "median": self.median, "min": float(np.min(self.values)),
                "max": float(np.max(self.values)),
                "n_quantities": int(self.values.size),
                "n_degenerate": int(np.sum(self.degenerate)) if self.degenerate is not None else 0}


@dataclass
class MraeReport:
    errors: np.ndarray
    median: float
    n_included: int
    n_excluded: int

    def to_dict(self) -> dict:
        return {"median": self.median, "n_included": self.n_included,
                "n_excluded": self.n_excluded}


def _autocovariance(x):
    n = x.size
    x = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    return acov


def _ess_geyer(x):
    n = x.size
    acov = _autocovariance(x)
    if acov[0] <= 0 or not np.isfinite(acov[0]):
        return float(n), True
    rho = acov / acov[0]
    # initial positive sequence of paired sums, made monotone
    pairs = rho[0:n - 1:2][: (n - 1) // 2] + rho[1:n:2][: (n - 1) // 2]
    total = 0.0
    prev = np.inf
    for k, g in enumerate(pairs):
        if g <= 0:
            break
        g = min(g, prev)
        prev = g
        total += g
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    return float(n / tau), False


def effective_sample_size(trace) -> float:
    """Autocorrelation ESS B / (1 + 2 sum rho_k), initial monotone sequence truncation.

    A constant trace returns B.  Use :func:`ess_report` for the degeneracy flag.
    """
    x = np.asarray(trace, dtype=float).ravel()
    if x.size < 10:
        raise ValueError("trace must have at least 10 draws")
    return _ess_geyer(x)[0]


def effective_sample_size_batch(trace, n_batches: int | None = None) -> float:
    """B * W / (n_b var(batch means)): within-batch against between-batch variance.

    With a 2-D array, rows are independent chains; otherwise a single chain is
    cut into ``n_batches`` contiguous batches (default floor(sqrt(B))).
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim == 1:
        B = x.size
        nb = n_batches or max(2, int(np.sqrt(B)))
        size = B // nb
        x = x[: nb * size].reshape(nb, size)
    n_chain, length = x.shape
    W = np.mean(np.var(x, axis=1, ddof=1))
    between = length * np.var(x.mean(axis=1), ddof=1)
    total = n_chain * length
    if between <= 0 or W <= 0:
        return float(total)
    return float(min(total * W / between, total * np.log10(max(total, 10))))


def ess_report(traces, estimator: str = "autocorrelation") -> EssReport:
    """ESS for each column of a (B, Q) array of traces."""
    X = np.asarray(traces, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    B = X.shape[0]
    vals = np.empty(X.shape[1])
    degenerate = np.zeros(X.shape[1], dtype=bool)
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.ptp(col) == 0:
            vals[j], degenerate[j] = float(B), True
        elif estimator == "autocorrelation":
            vals[j], degenerate[j] = _ess_geyer(col)
        elif estimator == "batch":
            vals[j] = effective_sample_size_batch(col)
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
    return EssReport(values=vals, chain_length=B, estimator=estimator, degenerate=degenerate)


def median_relative_absolute_error(truth, totals, estimate) -> MraeReport:
    """Median over cells of |m pi_hat - m pi| / (m pi (1 - pi)).

    ``totals`` broadcasts against the probability tensors (e.g. shape (N, T)
    against (K, N, T)).  Cells with a zero denominator are excluded.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if truth.shape != est.shape:
        raise ValueError("truth and estimate shapes differ")
    m = np.broadcast_to(np.asarray(totals, dtype=float), truth.shape)
    denom = m * truth * (1.0 - truth)
    keep = denom > 0
    err = np.abs(m * est - m * truth)[keep] / denom[keep]
    if err.size == 0:
        raise ValueError("no cells with a positive denominator")
    return MraeReport(errors=err, median=float(np.median(err)),
                      n_included=int(keep.sum()), n_excluded=int((~keep).sum()))


def credible_bounds(draws, level: float = 0.95, axis: int = 0):
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(draws, dtype=float), [tail, 1.0 - tail], axis=axis)
    return lo, hi


def coverage_report(replicates, truth, level: float = 0.95) -> float:
    """Fraction of cells whose equal-tailed interval contains the truth."""
    reps = np.asarray(replicates, dtype=float)
    if reps.shape[0] < 100:
        raise ValueError("coverage needs at least 100 replicates")
    lo, hi = credible_bounds(reps, level)
    truth = np.asarray(truth, dtype=float)
    return float(np.mean((lo <= truth) & (truth <= hi)))


def summarize_draws(pi_draws) -> dict:
    """Per-cell mean, sd and 95% bounds of a (B, K, N, T) replicate tensor."""
    d = np.asarray(pi_draws, dtype=float)
    lo, hi = credible_bounds(d, 0.95)
    return {"mean": d.mean(axis=0), "sd": d.std(axis=0, ddof=1) if d.shape[0] > 1
            else np.zeros(d.shape[1:]), "q025": lo, "q975": hi}
