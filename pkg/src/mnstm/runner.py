"""Run configuration and the fit pipeline: inputs, basis, model, chains, exports."""
from __future__ import annotations

import hashlib
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .ars import NonConcaveKernelError
from .diagnostics import (coverage_report, ess_report, median_relative_absolute_error,
                          summarize_draws)
from .gibbs import ChainConfig, SamplerDivergence, run_mnstm
from .io import (InputError, TraceWriter, load_adjacency, load_count_panel, load_covariates,
                 load_truth, write_json, write_posterior_summary)
from .model import CountPanel, MnStmSpec, assemble_mnstm
from .simulate import indicator_covariates
from .spatial_basis import build_moran_basis_system, build_static_basis_system, column_basis

log = logging.getLogger(__name__)

THREADS_ENV = "MNSTM_NUM_THREADS"

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

_SPEC_FIELDS = {f.name for f in fields(MnStmSpec)}


class StageError(RuntimeError):
    def __init__(self, stage, exc, code):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.code = code


@dataclass
class RunConfig:
    counts: str | None = None
    adjacency: str | None = None
    covariates: str | None = None
    truth: str | None = None
    out: str | None = None
    model: str = "mnstm"
    basis: str = "moran"
    rank: int = 10
    n_units: int | None = None
    n_times: int | None = None
    category_order: str = "input"
    damping: float | None = None
    t_star: int | None = None
    iterations: int = 2000
    burn_in: int | None = None
    thinning: int = 1
    seed: int = 0
    n_chains: int = 1
    merge_rows: bool = True
    xi_prediction: str = "prior"
    ess_estimator: str = "autocorrelation"
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in ("mnstm", "lmlb"):
            raise InputError(f"model must be 'mnstm' or 'lmlb', got {self.model!r}")
        if self.basis not in ("moran", "complement"):
            raise InputError(f"basis must be 'moran' or 'complement', got {self.basis!r}")
        if self.category_order not in ("input", "descending"):
            raise InputError("category_order must be 'input' or 'descending'")
        if self.ess_estimator not in ("autocorrelation", "batch"):
            raise InputError("ess_estimator must be 'autocorrelation' or 'batch'")
        if int(self.rank) < 1:
            raise InputError("rank must be >= 1")
        unknown = set(self.hyper) - _SPEC_FIELDS
        if unknown:
            raise InputError(f"unknown hyperparameter(s): {sorted(unknown)}")
        try:
            self.chain_config()
            self.model_spec()
        except ValueError as exc:
            raise InputError(str(exc)) from None

    @classmethod
    def from_mapping(cls, data: dict, base_dir=None) -> "RunConfig":
        data = dict(data or {})
        names = {f.name for f in fields(cls)}
        hyper = dict(data.pop("hyper", {}) or {})
        for key in list(data):
            if key in _SPEC_FIELDS and key not in names:
                hyper[key] = data.pop(key)
        unknown = set(data) - names
        if unknown:
            raise InputError(f"unknown config key(s): {sorted(unknown)}")
        if base_dir is not None:
            for key in ("counts", "adjacency", "covariates", "truth", "out"):
                if data.get(key) and not os.path.isabs(data[key]):
                    data[key] = str(Path(base_dir) / data[key])
        return cls(**data, hyper=hyper)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            with path.open(encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise InputError(f"config {path} must be a mapping")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        cfg = cls.from_mapping(data, base_dir=path.parent)
        return cfg.updated(overrides or {})

    def updated(self, overrides: dict) -> "RunConfig":
        data = asdict(self)
        hyper = dict(data.pop("hyper"))
        for k, v in overrides.items():
            if v is None:
                continue
            if k in _SPEC_FIELDS:
                hyper[k] = v
            else:
                data[k] = v
        return RunConfig(**data, hyper=hyper)

    def chain_config(self) -> ChainConfig:
        return ChainConfig(iterations=int(self.iterations), burn_in=self.burn_in,
                           thinning=int(self.thinning), seed=int(self.seed),
                           n_chains=int(self.n_chains), merge_rows=bool(self.merge_rows),
                           xi_prediction=self.xi_prediction)

    def model_spec(self) -> MnStmSpec:
        return MnStmSpec(**self.hyper)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved_burn_in"] = self.chain_config().burn_in
        d["resolved_hyper"] = self.model_spec().to_dict()
        return d


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class PreparedRun:
    config: RunConfig
    panel: CountPanel
    model: object
    truth: np.ndarray | None
    totals_truth: np.ndarray | None
    category_perm: np.ndarray
    info: dict


def prepare(config: RunConfig) -> PreparedRun:
    """Load inputs and assemble the model; raises StageError."""
    try:
        if not config.counts:
            raise InputError("no counts file given")
        if not config.out:
            raise InputError("no output directory given")
        panel = load_count_panel(config.counts, n_units=config.n_units, n_times=config.n_times)
        adjacency = None
        if config.adjacency:
            adjacency = load_adjacency(config.adjacency, n_nodes=config.n_units or panel.N)
            if adjacency.n_nodes != panel.N:
                if adjacency.n_nodes > panel.N and config.n_units is None:
                    panel = load_count_panel(config.counts, n_units=adjacency.n_nodes,
                                             n_times=config.n_times)
                else:
                    raise InputError(f"adjacency has {adjacency.n_nodes} nodes but the panel "
                                     f"has {panel.N} units")
        K, N, T = panel.K, panel.N, panel.T
        if config.covariates:
            covariates = load_covariates(config.covariates, K, N, T)
        else:
            covariates = indicator_covariates(N, K, T)
        perm = np.arange(K)
        if config.category_order == "descending":
            perm = np.argsort(-panel.counts.sum(axis=(1, 2)), kind="stable")
            panel = CountPanel(panel.counts[perm], panel.observed)
        truth = totals = None
        if config.truth:
            truth, totals = load_truth(config.truth, K, N, T)
            truth = truth[perm]
    except (InputError, OSError, ValueError) as exc:
        raise StageError("load", exc, EXIT_USER) from exc
    try:
        obs_rows = [panel.obs_rows(t) for t in range(T)]
        r = int(config.rank)
        if config.model == "lmlb":
            if T != 1:
                raise InputError("the static model needs a single time point")
            if config.basis == "complement":
                basis = build_static_basis_system(covariates[0], r, n_layers=K - 1,
                                                  obs_rows=obs_rows[0])
            else:
                if adjacency is None:
                    raise InputError("a Moran basis needs an adjacency file")
                from .spatial_basis import mi_basis
                A = adjacency.replicate(K - 1)
                Phi = mi_basis(column_basis(covariates[0]), A, r)
                basis = build_static_basis_system(covariates[0], r, Phi=Phi, n_layers=K - 1,
                                                  obs_rows=obs_rows[0])
        else:
            if config.basis != "moran":
                raise InputError("the spatio-temporal model uses the Moran basis")
            if adjacency is None:
                raise InputError("the spatio-temporal model needs an adjacency file")
            basis = build_moran_basis_system(covariates, adjacency, obs_rows, r, K - 1,
                                             damping=config.damping, t_star=config.t_star)
    except InputError as exc:
        raise StageError("basis", exc, EXIT_USER) from exc
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise StageError("basis", exc, EXIT_NUMERIC) from exc
    try:
        model = assemble_mnstm(panel, basis, config.model_spec())
    except ValueError as exc:
        raise StageError("model", exc, EXIT_USER) from exc
    return PreparedRun(config=config, panel=panel, model=model, truth=truth, totals_truth=totals,
                       category_perm=perm, info=dict(basis.info))


def _chain_job(args):
    model, chain_cfg, index = args
    return run_mnstm(model, chain_cfg, chain_index=index)


def sample_chains(prep: PreparedRun, writer: TraceWriter | None = None, workers: int | None = None):
    cfg = prep.config.chain_config()
    workers = default_workers() if workers is None else workers
    results = []
    try:
        if workers > 1 and cfg.n_chains > 1:
            with ProcessPoolExecutor(max_workers=min(workers, cfg.n_chains)) as pool:
                results = list(pool.map(_chain_job, [(prep.model, cfg, c)
                                                      for c in range(cfg.n_chains)]))
            if writer is not None:
                for res in results:
                    for j, (st, pi, lj) in enumerate(zip(res.states, res.pi_draws, res.log_joint)):
                        writer.write(res.chain_index, cfg.burn_in + j * cfg.thinning, st, pi, lj)
        else:
            for c in range(cfg.n_chains):
                cb = None
                if writer is not None:
                    def cb(it, state, pi, value, _c=c):
                        writer.write(_c, it, state, pi, value)
                results.append(run_mnstm(prep.model, cfg, chain_index=c, callback=cb))
    except (SamplerDivergence, NonConcaveKernelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError("sample", exc, EXIT_NUMERIC) from exc
    except ValueError as exc:
        raise StageError("sample", exc, EXIT_NUMERIC) from exc
    return results


def compute_diagnostics(pi_draws, chain_ids, truth=None, totals=None,
                        estimator: str = "autocorrelation") -> dict:
    """ESS over every cell probability plus MRAE and coverage when truth is known."""
    B = pi_draws.shape[0]
    flat = pi_draws.reshape(B, -1)
    out = {"n_draws": int(B)}
    chains = np.unique(chain_ids)
    if estimator == "batch" and chains.size > 1:
        per = [flat[chain_ids == c] for c in chains]
        length = min(p.shape[0] for p in per)
        from .diagnostics import EssReport, effective_sample_size_batch
        vals = np.array([effective_sample_size_batch(np.stack([p[:length, j] for p in per]))
                         for j in range(flat.shape[1])])
        rep = EssReport(values=vals, chain_length=int(B), estimator="batch",
                        degenerate=np.zeros(vals.size, bool))
    else:
        per_chain = [ess_report(flat[chain_ids == c], estimator) for c in chains]
        vals = np.sum([r.values for r in per_chain], axis=0)
        deg = np.any([r.degenerate for r in per_chain], axis=0)
        from .diagnostics import EssReport
        rep = EssReport(values=vals, chain_length=int(B), estimator=estimator, degenerate=deg)
    out["ess"] = rep.to_dict()
    if truth is not None:
        est = pi_draws.mean(axis=0)
        tot = totals if totals is not None else np.ones(truth.shape[1:])
        out["mrae"] = median_relative_absolute_error(truth, tot[None], est).to_dict()
        if B >= 100:
            out["coverage_95"] = coverage_report(pi_draws, truth, 0.95)
        out["mean_abs_error"] = float(np.mean(np.abs(est - truth)))
    return out


class _InputOrderWriter:
    """Stores probability draws under the caller's category labels, not the fitted order."""

    def __init__(self, writer: TraceWriter, inverse_perm: np.ndarray):
        self._writer = writer
        self._inv = inverse_perm

    def write(self, chain, iteration, state, pi, log_joint):
        self._writer.write(chain, iteration, state, pi[self._inv], log_joint)

    def close(self):
        self._writer.close()


def run(config: RunConfig, workers: int | None = None) -> int:
    """Full pipeline; returns an exit code and logs a stage-tagged message on failure."""
    try:
        prep = prepare(config)
        out = Path(config.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name in ("trace.csv", "pi_trace.bin", "pi_trace.json"):
                if (out / name).exists():
                    (out / name).unlink()
        except OSError as exc:
            raise StageError("export", exc, EXIT_USER) from exc
        panel = prep.panel
        inv = np.argsort(prep.category_perm)
        writer = _InputOrderWriter(TraceWriter(out, prep.model.initial_state().flat_names(),
                                               (panel.K, panel.N, panel.T)), inv)
        try:
            results = sample_chains(prep, writer, workers)
        finally:
            writer.close()
        pi = np.concatenate([r.pi_draws for r in results], axis=0)
        chain_ids = np.concatenate([np.full(r.pi_draws.shape[0], r.chain_index) for r in results])
        pi_orig = pi[:, inv]
        truth_orig = prep.truth[inv] if prep.truth is not None else None
        diag = compute_diagnostics(pi_orig, chain_ids, truth_orig, prep.totals_truth,
                                   config.ess_estimator)
        diag["basis"] = {k: v for k, v in prep.info.items()}
        diag["final_log_joint"] = [float(r.log_joint[-1]) for r in results]
        summary = summarize_draws(pi_orig)
        write_posterior_summary(summary, out / "posterior_summary.csv")
        write_json(diag, out / "diagnostics.json")
        manifest = {
            "package_version": __version__,
            "config": config.to_dict(),
            "seed": int(config.seed),
            "workers": workers if workers is not None else default_workers(),
            "inputs": {k: {"path": getattr(config, k), "sha256": _sha256(getattr(config, k))}
                       for k in ("counts", "adjacency", "covariates", "truth")
                       if getattr(config, k)},
            "category_permutation": prep.category_perm.tolist(),
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        write_json(manifest, out / "manifest.json")
        log.info("wrote %s", out)
        return EXIT_OK
    except StageError as exc:
        log.error("%s", exc)
        return exc.code
