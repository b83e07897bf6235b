"""Kernel and trajectory error measures."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .dynamics import SystemSpec, _pair_index, integrate, sample_initial_conditions, simulate_batch
from .errors import UsageError
from .features import feature_map
from .mpls import ReductionMap

log = logging.getLogger(__name__)

M_RHO = 2000
L_EVAL = 100
# one RK4 step per evaluation interval; on the benchmarks this stays within
# 1e-5 relative of a 1e-3 step, far below the errors being measured
EVAL_SUBSTEPS = 1


@dataclass
class RhoSamples:
    """Empirical pair-feature measure: features ``y`` and weights ``|xi - xj|``."""

    y: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.weight)


def sample_rho_T(spec: SystemSpec, M_rho: int = M_RHO) -> RhoSamples:
    """Features of every ordered pair at every observation time of fresh trajectories.

    ``spec.seed`` should differ from any seed used for training data.
    """
    x0 = sample_initial_conditions(spec, M_rho)
    states, _ = simulate_batch(spec, x0)
    i, j = _pair_index(spec.N)
    xi, xj = states[:, :, i], states[:, :, j]
    r = xj - xi
    w = np.sqrt(np.einsum("...k,...k->...", r, r))
    D = 2 * spec.d ** 2 + 3 * spec.d
    return RhoSamples(feature_map(xi, xj).reshape(-1, D), w.reshape(-1))


def err_phi(true_B: ReductionMap, true_phi, est, rho: RhoSamples):
    """Weighted L2(rho) kernel error, absolute and relative.

    ``est`` is anything with an ``evaluate(y)`` method (a fitted model) or a
    callable on features.
    """
    if len(rho) == 0 or not np.any(rho.weight > 0):
        raise UsageError("need at least one sample with nonzero weight")
    truth = true_phi(true_B.project(rho.y))
    guess = est.evaluate(rho.y) if hasattr(est, "evaluate") else est(rho.y)
    w2 = rho.weight ** 2
    absolute = math.sqrt(np.mean((truth - guess) ** 2 * w2))
    denom = math.sqrt(np.mean(truth ** 2 * w2))
    if denom == 0.0:
        raise ZeroDivisionError("true kernel vanishes on the sampled measure")
    return absolute, absolute / denom


def _trapezoid_mean_sq(diff, times):
    # (1/(N T)) sum_i int |diff_i(t)|^2 dt, for diff shaped (B, L, N, d)
    sq = np.einsum("blnk,blnk->bl", diff, diff) / diff.shape[2]
    T = times[-1] - times[0]
    return trapezoid(sq, times, axis=1) / T


def matched_substeps(spec: SystemSpec, L_eval: int) -> int:
    """Substeps per evaluation interval reproducing the data-generation step size."""
    return max(1, math.ceil(spec.n_sub * (spec.L - 1) / (L_eval - 1) - 1e-9))


def true_trajectories(spec: SystemSpec, M_eval: int, L_eval: int = L_EVAL,
                      n_sub: int = EVAL_SUBSTEPS):
    """Initial conditions and true trajectories on ``L_eval`` equi-spaced times."""
    times = np.linspace(0.0, spec.T, L_eval)
    x0 = sample_initial_conditions(spec, M_eval)
    states, _ = integrate(spec.kernel, x0, times, n_sub)
    return x0, times, states, n_sub


def err_traj(spec: SystemSpec, est_kernel, M_eval: int, L_eval: int = L_EVAL,
             n_sub: int = EVAL_SUBSTEPS, truth=None):
    """Mean relative trajectory error over fresh initial conditions.

    Both systems share the integrator and step size. Returns
    ``(mean, per_ic, diverged)``; diverged initial conditions get ``nan``
    and are left out of the mean. ``truth`` may carry a precomputed
    ``true_trajectories`` result for the same spec.
    """
    if M_eval < 1:
        raise UsageError("M_eval must be >= 1")
    if truth is None:
        truth = true_trajectories(spec, M_eval, L_eval, n_sub)
    x0, times, states, n_sub = truth
    est_states, ok = integrate(est_kernel, x0, times, n_sub, strict=False)
    num = _trapezoid_mean_sq(states - est_states, times)
    den = _trapezoid_mean_sq(states, times)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_ic = np.sqrt(num) / np.sqrt(den)
    per_ic = np.where(ok, per_ic, np.nan)
    diverged = int((~ok).sum())
    if diverged:
        log.warning("%d of %d estimated trajectories diverged", diverged, len(ok))
    mean = float(np.nanmean(per_ic)) if diverged < len(ok) else float("nan")
    return mean, per_ic, diverged


ROWS = (
    ("err_B", "Err_B"),
    ("err_phi_rel", "Err_phi^rel"),
    ("err_phi_rel_oracle", "Err_phi^rel (Oracle)"),
    ("err_traj_rel_mean", "Err_traj,mean^rel"),
    ("err_traj_rel_mean_transfer", "Err_traj,mean^rel (Transfer)"),
)


@dataclass
class ErrorReport:
    """Per-trial error values keyed by row name, plus extra diagnostics."""

    system: str
    trials: dict = field(default_factory=dict)

    def add(self, values: dict):
        for key, val in values.items():
            self.trials.setdefault(key, []).append(float(val) if val is not None else math.nan)

    def summary(self, key):
        vals = np.asarray(self.trials.get(key, []), dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            return math.nan, None, 0
        std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
        return float(np.mean(vals)), std, len(vals)

    def mean(self, key) -> float:
        return self.summary(key)[0]

    def table(self) -> str:
        n_trials = max((len(v) for v in self.trials.values()), default=0)
        lines = [f"# {self.system} errors ({n_trials} trials, mean +- std)"]
        width = max(len(label) for _, label in ROWS)
        for key, label in ROWS:
            mean, std, n = self.summary(key)
            if n == 0:
                cell = "n/a"
            else:
                cell = f"{mean:.3e}" + (f" +- {std:.2e}" if std is not None else " +- n/a")
                if n < n_trials:
                    cell += f"  (incomplete: {n}/{n_trials})"
            lines.append(f"{label:<{width}} | {cell}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"system": self.system, "trials": self.trials}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorReport":
        return cls(d["system"], {k: list(v) for k, v in d["trials"].items()})
