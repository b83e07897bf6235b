"""End-to-end runs: data generation, learning, evaluation and multi-trial tables."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import benchmarks, io
from .dynamics import TrajectorySet, derive_seed, generate_dataset, integrate
from .errors import ConfigurationError, KernelscopeError
from .features import extract_regression_samples
from .metrics import (L_EVAL, M_RHO, ErrorReport, err_phi, err_traj, sample_rho_T,
                      true_trajectories)
from .mpls import MplsConfig, ReductionMap, err_B, estimate_reduction, interacting
from .regression import KernelModel, default_space, fit_kernel

log = logging.getLogger(__name__)

COMMON = benchmarks.COMMON
# evaluation sets are keyed off the master seed with these tags, away from trial indices
_RHO_KEY, _TRAJ_KEY, _TRANSFER_KEY, _TRANSFER_DATA_KEY = 1_000_001, 1_000_002, 1_000_003, 1_000_004
M_EVAL = 500
GRID_1D = 512
GRID_2D = 128


class StageError(KernelscopeError):
    """A module error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (KernelscopeError, ValueError, ArithmeticError) as err:
        raise StageError(name, err) from err


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on. Untouched defaults are the benchmark settings."""

    system: str = "pl"
    M: int = COMMON["M"]
    M_transfer: int = COMMON["M_transfer"]
    N: int = COMMON["N"]
    N_transfer: int = COMMON["N_transfer"]
    L: int = COMMON["L"]
    T: float = COMMON["T"]
    d: int = COMMON["d"]
    dprime: int | None = None  # None: the benchmark's own
    mpls: MplsConfig = MplsConfig()
    split_seed: int | None = None  # None: derived per trial
    basis: str | None = None  # None: the benchmark's own
    degree: int | None = None
    n_override: int | None = None
    trials: int = 10
    seed: int = 0
    jobs: int = 1
    oracle_only: bool = False
    M_eval: int = M_EVAL
    M_rho: int = M_RHO
    L_eval: int = L_EVAL
    out: str = "kernelscope-out"

    def __post_init__(self):
        benchmarks.get(self.system)
        if self.d != COMMON["d"]:
            raise ConfigurationError(f"the benchmark systems live in d = {COMMON['d']}")
        for name in ("M", "M_transfer", "trials", "jobs", "M_eval", "M_rho"):
            if getattr(self, name) < (0 if name in ("M", "M_transfer") else 1):
                raise ConfigurationError(f"{name} = {getattr(self, name)} out of range")
        if self.N != 2:
            raise ConfigurationError("training data needs N = 2 agents")
        if self.L < 2 or self.L_eval < 2 or not self.T > 0:
            raise ConfigurationError("need L >= 2, L_eval >= 2 and T > 0")

    @property
    def bench(self):
        return benchmarks.get(self.system)

    @property
    def reduced_dim(self) -> int:
        return self.dprime if self.dprime is not None else self.bench.dprime

    @property
    def family(self) -> str:
        return self.basis if self.basis is not None else self.bench.basis

    @property
    def basis_degree(self) -> int:
        return self.degree if self.degree is not None else self.bench.degree

    def train_seed(self, trial: int) -> int:
        return derive_seed(self.seed, trial, 0)

    def mpls_config(self, trial: int) -> MplsConfig:
        split = self.split_seed if self.split_seed is not None else derive_seed(self.seed, trial, 1)
        return dataclasses.replace(self.mpls, split_seed=split)

    def train_system(self, trial: int = 0):
        return self.bench.system(N=self.N, L=self.L, T=self.T, seed=self.train_seed(trial))

    def eval_system(self, N: int, key: int, L: int | None = None):
        return self.bench.system(N=N, L=self.L if L is None else L, T=self.T,
                                 seed=derive_seed(self.seed, key))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mpls"] = dataclasses.asdict(self.mpls)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        if "mpls" in d and isinstance(d["mpls"], dict):
            mk = {f.name for f in dataclasses.fields(MplsConfig)}
            bad = set(d["mpls"]) - mk
            if bad:
                raise ConfigurationError(f"unknown mpls keys: {sorted(bad)}")
            d["mpls"] = MplsConfig(**d["mpls"])
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            base = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from err
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(base)


@dataclass
class LearnResult:
    learned: KernelModel | None
    oracle: KernelModel | None
    samples_y: np.ndarray = field(repr=False, default=None)


def _fit(data: TrajectorySet, B: ReductionMap, values, cfg: RunConfig) -> KernelModel:
    space = default_space(values, data.spec.L, data.M, B.dprime, cfg.family, cfg.basis_degree,
                          cfg.n_override)
    return fit_kernel(data, B, space)


def learn(data: TrajectorySet, cfg: RunConfig, trial: int = 0) -> LearnResult:
    """Reduction map by MPLS, then the kernel on it; also the true-map fit.

    The support of each fit is taken from the reduced features of samples
    with a nonzero observed kernel value, where the kernel is actually seen.
    """
    bench = cfg.bench
    with stage("learn:samples"):
        samples = extract_regression_samples(data)
        seen = samples.y[interacting(samples)]
    learned = None
    if not cfg.oracle_only:
        with stage("learn:mpls"):
            B = estimate_reduction(samples, cfg.reduced_dim, cfg.mpls_config(trial))
        with stage("learn:fit"):
            learned = _fit(data, B, B.project(seen), cfg)
    oracle = None
    if bench.true_B.dprime == cfg.reduced_dim:
        with stage("learn:oracle-fit"):
            oracle = _fit(data, bench.true_B, bench.true_B.project(seen), cfg)
    return LearnResult(learned, oracle, samples.y)


@lru_cache(maxsize=4)
def evaluation_sets(cfg: RunConfig):
    """Shared, trial-independent evaluation data: rho samples and true trajectories."""
    with stage("evaluate:truth"):
        rho = sample_rho_T(cfg.eval_system(cfg.N, _RHO_KEY), cfg.M_rho)
        sys2 = cfg.eval_system(cfg.N, _TRAJ_KEY)
        sysN = cfg.eval_system(cfg.N_transfer, _TRANSFER_KEY)
        truth2 = true_trajectories(sys2, cfg.M_eval, cfg.L_eval)
        truthN = true_trajectories(sysN, cfg.M_transfer, cfg.L_eval) if cfg.M_transfer else None
    return rho, (sys2, truth2), (sysN, truthN)


def evaluate(result: LearnResult, cfg: RunConfig) -> dict:
    """All error rows for one trial, plus diagnostics."""
    bench = cfg.bench
    rho, (sys2, truth2), (sysN, truthN) = evaluation_sets(cfg)
    row = {}
    if result.learned is not None:
        m = result.learned
        with stage("evaluate:learned"):
            if m.reduction.dprime == bench.true_B.dprime:
                row["err_B"] = err_B(bench.true_B, m.reduction)
                row["err_B_fro"] = err_B(bench.true_B, m.reduction, ord="fro")
            row["err_phi_abs"], row["err_phi_rel"] = err_phi(bench.true_B, bench.true_phi, m, rho)
            row["err_traj_rel_mean"], _, div2 = err_traj(sys2, m, cfg.M_eval, truth=truth2)
            row["diverged"] = div2
            if truthN is not None:
                row["err_traj_rel_mean_transfer"], _, divN = err_traj(
                    sysN, m, cfg.M_transfer, truth=truthN)
                row["diverged_transfer"] = divN
            row["with_beta"] = float(m.reduction.provenance == "mpls_with_beta")
    if result.oracle is not None:
        with stage("evaluate:oracle"):
            row["err_phi_rel_oracle"] = err_phi(bench.true_B, bench.true_phi, result.oracle, rho)[1]
    return row


def run_trial(cfg: RunConfig, trial: int, keep: bool = False):
    """One generate-learn-evaluate pass; with ``keep`` also the fitted models."""
    with stage("generate"):
        data = generate_dataset(cfg.train_system(trial), cfg.M)
    result = learn(data, cfg, trial)
    row = evaluate(result, cfg)
    return (row, result) if keep else row


def _trial_or_none(args):
    cfg, trial = args
    try:
        return trial, run_trial(cfg, trial), None
    except KernelscopeError as err:
        return trial, None, str(err)


def reproduce(cfg: RunConfig):
    """Run ``cfg.trials`` independent trials and aggregate them.

    Returns ``(report, first)`` where ``first`` holds the models of trial 0,
    or ``None`` if it failed. Failed trials are logged and leave their rows
    short, which the table marks.
    """
    report = ErrorReport(cfg.bench.name)
    rest = [(cfg, t) for t in range(1, cfg.trials)]
    first = None
    pool = None
    if cfg.jobs > 1 and rest:
        evaluation_sets(cfg)  # computed once, inherited by forked workers
        pool = ProcessPoolExecutor(max_workers=min(cfg.jobs - 1, len(rest)) or 1)
        pending = pool.map(_trial_or_none, rest)
    try:
        try:
            row0, first = run_trial(cfg, 0, keep=True)
            outcomes = [(0, row0, None)]
        except KernelscopeError as err:
            outcomes = [(0, None, str(err))]
        if pool is not None:
            outcomes += list(pending)
        else:
            outcomes += [_trial_or_none(j) for j in rest]
    finally:
        if pool is not None:
            pool.shutdown()
    for trial, row, err in outcomes:
        if err is not None:
            log.error("trial %d failed: %s", trial, err)
            report.trials.setdefault("failed_trials", []).append(float(trial))
            continue
        report.add(row)
    return report, first


# plot data

def _histogram(values: np.ndarray, bins: int = 64):
    counts, edges = np.histogram(values, bins=bins)
    return {"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts}


def kernel_grid(model: KernelModel, n: int | None = None) -> dict:
    """The fitted kernel on a uniform grid over its support."""
    sp = model.space
    if sp.dprime == 1:
        t = np.linspace(sp.lo[0], sp.hi[0], n or GRID_1D)
        return {"xi": t, "phi_hat": model.reduced(t[:, None])}
    if sp.dprime == 2:
        n = n or GRID_2D
        a = np.linspace(sp.lo[0], sp.hi[0], n)
        b = np.linspace(sp.lo[1], sp.hi[1], n)
        g1, g2 = np.meshgrid(a, b, indexing="ij")
        pts = np.column_stack([g1.ravel(), g2.ravel()])
        return {"xi1": pts[:, 0], "xi2": pts[:, 1], "phi_hat": model.reduced(pts)}
    raise ConfigurationError("kernel grids are emitted for d' <= 2 only")


def paired_trajectory(cfg: RunConfig, model, N: int, key: int) -> dict:
    """True and estimated trajectories of one fresh initial condition."""
    sys_ = cfg.eval_system(N, key)
    x0, times, states, n_sub = true_trajectories(sys_, 1, cfg.L_eval)
    est, _ = integrate(model, x0, times, n_sub, strict=False)
    L, d = len(times), sys_.d
    cols = {"t": np.repeat(times, N), "agent": np.tile(np.arange(N), L)}
    for k in range(d):
        cols[f"true_x{k + 1}"] = states[0, :, :, k].ravel()
    for k in range(d):
        cols[f"est_x{k + 1}"] = est[0, :, :, k].ravel()
    return cols


def write_plot_data(outdir, result: LearnResult, cfg: RunConfig) -> list[Path]:
    """Columnar text files for feature scatter, kernel grids and trajectories."""
    outdir = Path(outdir)
    bench = cfg.bench
    rho = evaluation_sets(cfg)[0]
    written = []

    def emit(name, cols, comment):
        path = outdir / name
        io.write_columns(path, cols, comment)
        written.append(path)

    true_red = bench.true_B.project(rho.y)
    if result.learned is not None:
        m = result.learned
        est_red = m.reduction.project(rho.y)
        cols = {}
        for k in range(true_red.shape[1]):
            cols[f"By{k + 1}"] = true_red[:, k]
        for k in range(est_red.shape[1]):
            cols[f"Bhat_y{k + 1}"] = est_red[:, k]
        emit("feature_scatter.txt", cols, "true vs estimated reduced features on rho_T samples")
        grid = kernel_grid(m)
        emit("kernel_learned.txt", grid, "learned kernel on its support")
        seen = m.reduction.project(result.samples_y) if result.samples_y is not None else est_red
        for k in range(seen.shape[1]):
            emit(f"hist_learned_{k + 1}.txt", _histogram(seen[:, k]),
                 f"training distribution of estimated reduced variable {k + 1}")
        emit("trajectory_N2.txt", paired_trajectory(cfg, m, cfg.N, _TRAJ_KEY), "one N=2 test run")
        emit(f"trajectory_N{cfg.N_transfer}.txt",
             paired_trajectory(cfg, m, cfg.N_transfer, _TRANSFER_KEY),
             f"one N={cfg.N_transfer} transfer run")
    if result.oracle is not None:
        grid = kernel_grid(result.oracle)
        pts = np.column_stack([v for k, v in grid.items() if k.startswith("xi")])
        grid["phi_true"] = bench.true_phi(pts)
        emit("kernel_oracle.txt", grid, "oracle-map kernel and the true kernel")
    return written


# the four subcommands as functions of a config and a directory

def system_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / cfg.system.lower()


def cmd_generate(cfg: RunConfig, trial: int = 0) -> list[Path]:
    d = system_dir(cfg)
    with stage("generate"):
        train = generate_dataset(cfg.train_system(trial), cfg.M)
        transfer = generate_dataset(cfg.eval_system(cfg.N_transfer, _TRANSFER_DATA_KEY),
                                    cfg.M_transfer)
    paths = [d / "train.ksc", d / "transfer.ksc"]
    io.save_trajectories(paths[0], train)
    io.save_trajectories(paths[1], transfer)
    return paths


def _save_models(d: Path, result: LearnResult) -> list[Path]:
    paths = []
    if result.learned is not None:
        paths += [d / "reduction.ksc", d / "model_learned.ksc"]
        io.save_reduction(paths[0], result.learned.reduction)
        io.save_model(paths[1], result.learned)
    if result.oracle is not None:
        paths.append(d / "model_oracle.ksc")
        io.save_model(paths[-1], result.oracle)
    return paths


def cmd_learn(cfg: RunConfig, trial: int = 0) -> list[Path]:
    d = system_dir(cfg)
    data = io.load_trajectories(d / "train.ksc")
    return _save_models(d, learn(data, cfg, trial))


def load_models(cfg: RunConfig) -> LearnResult:
    d = system_dir(cfg)
    learned = d / "model_learned.ksc"
    oracle = d / "model_oracle.ksc"
    if not learned.exists() and not oracle.exists():
        raise ConfigurationError(f"no model files in {d}; run `learn` first")
    samples_y = None
    if (d / "train.ksc").exists():
        samples_y = extract_regression_samples(io.load_trajectories(d / "train.ksc")).y
    return LearnResult(io.load_model(learned) if learned.exists() else None,
                       io.load_model(oracle) if oracle.exists() else None, samples_y)


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    d = system_dir(cfg)
    result = load_models(cfg)
    report = ErrorReport(cfg.bench.name)
    report.add(evaluate(result, cfg))
    io.save_report(d / "report", report)
    paths = [d / "report.txt", d / "report.json"]
    return paths + write_plot_data(d / "plots", result, cfg)


def cmd_reproduce(cfg: RunConfig) -> list[Path]:
    d = system_dir(cfg) / "reproduce"
    report, first = reproduce(cfg)
    io.save_report(d / "table", report)
    paths = [d / "table.txt", d / "table.json"]
    if first is not None:
        paths += _save_models(d, first)
        with stage("plots"):
            paths += write_plot_data(d / "plots", first, cfg)
    return paths
