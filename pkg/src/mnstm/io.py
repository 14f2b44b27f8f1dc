"""File formats: count panels, adjacency edge lists, covariates, truth and outputs.

Tabular files are RFC-4180 CSV with ``\\n`` line endings; indices are 0-based.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .model import CountPanel
from .spatial_basis import Adjacency


class InputError(ValueError):
    """Malformed or inconsistent user input."""


def _read_rows(path, required):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: header lacks column(s) {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, dict(zip(header, (c.strip() for c in row)))))
    return header, rows


def _int(value, path, lineno, name):
    try:
        v = int(value)
    except ValueError:
        raise InputError(f"{path}:{lineno}: {name}={value!r} is not an integer") from None
    if str(v) != value.lstrip("+"):
        raise InputError(f"{path}:{lineno}: {name}={value!r} is not an integer")
    if v < 0:
        raise InputError(f"{path}:{lineno}: {name} must be nonnegative")
    return v


def load_count_panel(path, n_units: int | None = None, n_times: int | None = None,
                     n_categories: int | None = None) -> CountPanel:
    """Read ``k,i,t,y[,m]`` rows; (i, t) pairs without rows are unobserved.

    Every observed cell must list all K categories.  When an ``m`` column is
    present it must equal the category sum on every row of the cell.
    """
    header, rows = _read_rows(path, ("k", "i", "t", "y"))
    if not rows:
        raise InputError(f"{path}: no data rows")
    has_m = "m" in header
    cells = {}
    seen = {}
    for lineno, rec in rows:
        k = _int(rec["k"], path, lineno, "k")
        i = _int(rec["i"], path, lineno, "i")
        t = _int(rec["t"], path, lineno, "t")
        y = _int(rec["y"], path, lineno, "y")
        key = (k, i, t)
        if key in seen:
            raise InputError(f"{path}:{lineno}: duplicate key k={k}, i={i}, t={t} "
                             f"(first at line {seen[key]})")
        seen[key] = lineno
        m = _int(rec["m"], path, lineno, "m") if has_m else None
        cells.setdefault((i, t), []).append((k, y, m, lineno))
    K = n_categories or 1 + max(k for k, _, _ in seen)
    N = n_units or 1 + max(i for _, i, _ in seen)
    T = n_times or 1 + max(t for _, _, t in seen)
    Y = np.zeros((K, N, T), dtype=np.int64)
    obs = np.zeros((N, T), dtype=bool)
    for (i, t), entries in cells.items():
        if i >= N or t >= T:
            raise InputError(f"{path}:{entries[0][3]}: index (i={i}, t={t}) outside N={N}, T={T}")
        ks = sorted(k for k, *_ in entries)
        if ks != list(range(K)):
            raise InputError(f"{path}:{entries[0][3]}: cell (i={i}, t={t}) lists categories "
                             f"{ks}, expected 0..{K - 1}")
        total = sum(y for _, y, _, _ in entries)
        for k, y, m, lineno in entries:
            if m is not None and m != total:
                raise InputError(f"{path}:{lineno}: counts for (i={i}, t={t}) sum to {total} "
                                 f"but m={m}")
            Y[k, i, t] = y
        obs[i, t] = True
    return CountPanel(Y, obs)


def save_count_panel(panel: CountPanel, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "i", "t", "y", "m"])
        totals = panel.totals
        for t in range(panel.T):
            for i in range(panel.N):
                if not panel.observed[i, t]:
                    continue
                for k in range(panel.K):
                    w.writerow([k, i, t, int(panel.counts[k, i, t]), int(totals[i, t])])


def load_adjacency(path, n_nodes: int | None = None) -> Adjacency:
    """Undirected edge list, one ``i j`` pair per line; ``#`` starts a comment."""
    path = Path(path)
    edges = []
    declared = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if line.startswith("# nodes:"):
                declared = int(line.split(":", 1)[1])
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'i j'")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer node index") from None
            if i < 0 or j < 0:
                raise InputError(f"{path}:{lineno}: negative node index")
            if i == j:
                raise InputError(f"{path}:{lineno}: self-loop at node {i}")
            edges.append((i, j, lineno))
    n = n_nodes or declared
    if n is None:
        n = 1 + max((max(i, j) for i, j, _ in edges), default=-1)
    for i, j, lineno in edges:
        if i >= n or j >= n:
            raise InputError(f"{path}:{lineno}: node index out of range for {n} nodes")
    return Adjacency.from_edges(n, [(i, j) for i, j, _ in edges])


def save_adjacency(adjacency: Adjacency, path) -> None:
    A = adjacency.matrix
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes: {A.shape[0]}\n")
        for i, j in zip(*np.nonzero(np.triu(A))):
            fh.write(f"{i} {j}\n")


def load_covariates(path, K: int, N: int, T: int) -> list:
    """``k,i,t,<names...>`` rows covering every prediction cell with k < K-1."""
    header, rows = _read_rows(path, ("k", "i", "t"))
    names = [h for h in header if h not in ("k", "i", "t")]
    out = [np.full(((K - 1) * N, len(names)), np.nan) for _ in range(T)]
    for lineno, rec in rows:
        k = _int(rec["k"], path, lineno, "k")
        i = _int(rec["i"], path, lineno, "i")
        t = _int(rec["t"], path, lineno, "t")
        if k >= K - 1 or i >= N or t >= T:
            raise InputError(f"{path}:{lineno}: index outside the prediction grid")
        try:
            out[t][k * N + i] = [float(rec[nm]) for nm in names]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric covariate") from None
    for t, X in enumerate(out):
        if np.isnan(X).any():
            raise InputError(f"{path}: covariates missing for some cells at t={t}")
    return out


def save_covariates(covariates, N: int, path) -> None:
    p = covariates[0].shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "i", "t"] + [f"x{j}" for j in range(p)])
        for t, X in enumerate(covariates):
            for row in range(X.shape[0]):
                w.writerow([row // N, row % N, t] + [repr(float(v)) for v in X[row]])


def save_truth(truth, totals, path) -> None:
    K, N, T = truth.shape
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "i", "t", "pi", "m"])
        for t in range(T):
            for i in range(N):
                for k in range(K):
                    w.writerow([k, i, t, repr(float(truth[k, i, t])), int(totals[i, t])])


def load_truth(path, K: int, N: int, T: int):
    _, rows = _read_rows(path, ("k", "i", "t", "pi"))
    pi = np.full((K, N, T), np.nan)
    m = np.ones((N, T))
    for lineno, rec in rows:
        k = _int(rec["k"], path, lineno, "k")
        i = _int(rec["i"], path, lineno, "i")
        t = _int(rec["t"], path, lineno, "t")
        if k >= K or i >= N or t >= T:
            raise InputError(f"{path}:{lineno}: index outside the panel")
        pi[k, i, t] = float(rec["pi"])
        if "m" in rec:
            m[i, t] = float(rec["m"])
    if np.isnan(pi).any():
        raise InputError(f"{path}: truth does not cover every cell")
    return pi, m


_SUMMARY_COLUMNS = ("mean", "sd", "q025", "q975")


def write_posterior_summary(summary: dict, path, category_labels=None) -> None:
    """One row per (k, i, t) with mean, sd, q025, q975 at full precision."""
    K, N, T = summary["mean"].shape
    labels = list(range(K)) if category_labels is None else list(category_labels)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    rows = []
    for t in range(T):
        for i in range(N):
            for k in range(K):
                rows.append((labels[k], i, t) + tuple(
                    repr(float(summary[c][k, i, t])) for c in _SUMMARY_COLUMNS))
    rows.sort(key=lambda r: (r[2], r[1], r[0]))
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("k", "i", "t") + _SUMMARY_COLUMNS)
        w.writerows(rows)
    os.replace(tmp, path)


def read_posterior_summary(path) -> dict:
    _, rows = _read_rows(path, ("k", "i", "t") + _SUMMARY_COLUMNS)
    K = 1 + max(int(r["k"]) for _, r in rows)
    N = 1 + max(int(r["i"]) for _, r in rows)
    T = 1 + max(int(r["t"]) for _, r in rows)
    out = {c: np.full((K, N, T), np.nan) for c in _SUMMARY_COLUMNS}
    for _, r in rows:
        for c in _SUMMARY_COLUMNS:
            out[c][int(r["k"]), int(r["i"]), int(r["t"])] = float(r[c])
    return out


class TraceWriter:
    """Append-only chain output.

    Parameters go to ``trace.csv`` (one row per kept draw) and probability
    tensors go to ``pi_trace.bin`` as raw little-endian float64, described by
    ``pi_trace.json``.
    """

    def __init__(self, out_dir, names, grid_shape):
        self.out_dir = Path(out_dir)
        self.names = list(names)
        self.grid_shape = tuple(int(v) for v in grid_shape)
        self._csv = (self.out_dir / "trace.csv").open("a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._csv, lineterminator="\n")
        if self._csv.tell() == 0:
            self._writer.writerow(["chain", "iteration", "log_joint"] + self.names)
        self._bin = (self.out_dir / "pi_trace.bin").open("ab")
        self.count = 0
        self.order = []

    def write(self, chain, iteration, state, pi, log_joint):
        self._writer.writerow([chain, iteration, repr(float(log_joint))]
                              + [repr(float(v)) for v in state.flat()])
        np.ascontiguousarray(pi, dtype="<f8").tofile(self._bin)
        self.count += 1
        self.order.append(chain)

    def close(self):
        self._csv.close()
        self._bin.close()
        meta = {"dtype": "<f8", "shape": [self.count] + list(self.grid_shape),
                "axes": ["draw", "k", "i", "t"], "chain_of_draw": self.order}
        with (self.out_dir / "pi_trace.json").open("w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)


def read_pi_trace(out_dir):
    out_dir = Path(out_dir)
    with (out_dir / "pi_trace.json").open(encoding="utf-8") as fh:
        meta = json.load(fh)
    data = np.fromfile(out_dir / "pi_trace.bin", dtype=meta["dtype"])
    return data.reshape(meta["shape"]), np.asarray(meta["chain_of_draw"])


def write_json(obj, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
