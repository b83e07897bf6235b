"""Multiplicatively perturbed least squares (MPLS) for the reduction map.

Given samples ``z_q = phi(B y_q)`` the estimator splits the regression
function into a linear part ``<beta, y>`` and a nonlinear remainder that
depends on ``y`` only through a few directions. ``beta`` comes from
ordinary least squares on one half of the data; on the other half the
residuals are locally re-weighted around ``K`` centers and regressed on
the features projected away from ``beta``. The leading right singular
vectors of the stacked slope perturbations span the nonlinear directions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, UsageError
from .features import RegressionSamples

log = logging.getLogger(__name__)

PROVENANCES = ("oracle", "mpls_with_beta", "mpls_without_beta")


@dataclass
class ReductionMap:
    """A ``d' x D`` matrix with orthonormal rows."""

    rows: np.ndarray
    provenance: str = "oracle"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.provenance not in PROVENANCES:
            raise UsageError(f"unknown provenance {self.provenance!r}")
        if self.dprime > self.D:
            raise UsageError(f"d' = {self.dprime} exceeds D = {self.D}")

    @property
    def dprime(self) -> int:
        return self.rows.shape[0]

    @property
    def D(self) -> int:
        return self.rows.shape[1]

    def project(self, y: np.ndarray) -> np.ndarray:
        """Reduced variables ``B y`` for features of shape ``(..., D)``."""
        return np.asarray(y) @ self.rows.T

    def orthonormality_defect(self) -> float:
        return float(np.abs(self.rows @ self.rows.T - np.eye(self.dprime)).max())


@dataclass(frozen=True)
class MplsConfig:
    K: int = 50
    lam: float | None = None  # None means 1/D
    split_seed: int = 0
    center_selection: str = "random_subset"
    project_centers: bool = True
    center: bool = True
    constant_bins: int = 28
    # drop samples with no observed interaction before estimating directions
    interacting_only: bool = True

    def bandwidth(self, D: int) -> float:
        return 1.0 / D if self.lam is None else self.lam


@dataclass
class MplsResult:
    beta_hat: np.ndarray
    A_hat: np.ndarray
    singular_values: np.ndarray
    P_hat: np.ndarray
    split: tuple


def split_samples(Q: int, seed: int):
    """Disjoint halves ``(S, S')`` of ``range(Q)``, each of size >= floor(Q/2)."""
    perm = np.random.default_rng(seed).permutation(Q)
    return np.sort(perm[Q // 2:]), np.sort(perm[:Q // 2])


def least_squares(X: np.ndarray, y: np.ndarray, cond_max: float = 1e12):
    """QR least squares, raising :class:`ConditioningError` on rank deficiency."""
    qmat, r, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    cond = np.inf if diag[-1] == 0 else diag[0] / diag[-1]
    if cond > cond_max:
        raise ConditioningError(
            f"least-squares design is rank deficient (condition estimate {cond:.3e})",
            condition=cond)
    coef = np.empty(X.shape[1])
    coef[piv] = sla.solve_triangular(r, qmat.T @ y)
    return coef


def _complement_basis(beta):
    # orthonormal basis (D x D-1) of the complement of beta
    D = beta.shape[0]
    u = beta / np.linalg.norm(beta)
    q, _ = np.linalg.qr(np.column_stack([u, np.eye(D)]))
    basis = q[:, 1:D]
    # remove the tiny residual component along beta left by QR
    basis -= np.outer(u, u @ basis)
    q2, _ = np.linalg.qr(basis)
    return q2


def mpls(samples: RegressionSamples, dprime: int, cfg: MplsConfig = MplsConfig(),
         centers: np.ndarray | None = None) -> MplsResult:
    """Estimate the linear direction and the nonlinear index directions.

    Parameters
    ----------
    samples : RegressionSamples
        Training pairs ``(y_q, z_q)``.
    dprime : int
        Number of reduced variables.
    cfg : MplsConfig
        Center count ``K``, weight bandwidth ``lam`` and split seed.
    centers : array, optional
        ``(K, D)`` perturbation centers, required when
        ``cfg.center_selection == "provided"``.

    With ``cfg.center`` features and values are shifted by their means over
    the OLS half first; directions are unaffected by the shift.

    Returns
    -------
    MplsResult
        ``beta_hat`` (D,), ``A_hat`` (d', D) with rows orthogonal to
        ``beta_hat``, and the singular values of the slope matrix.
    """
    y, z = samples.y, samples.z
    Q, D = y.shape
    if dprime > D:
        raise UsageError(f"d' = {dprime} exceeds D = {D}")
    if cfg.K < dprime:
        raise UsageError(f"K = {cfg.K} must be at least d' = {dprime}")
    if Q < max(2 * D, 2 * cfg.K):
        raise UsageError(f"need at least max(2D, 2K) = {max(2 * D, 2 * cfg.K)} samples, got {Q}")
    lam = cfg.bandwidth(D)
    if not lam > 0:
        raise UsageError("bandwidth must be positive")

    S, S1 = split_samples(Q, cfg.split_seed)
    y_mean = np.zeros(D)
    if cfg.center:
        # an intercept: the feature map has no constant, kernels usually do
        y_mean = y[S1].mean(axis=0)
        y = y - y_mean
        z = z - z[S1].mean()

    # 1. linear component from S'
    beta = least_squares(y[S1], z[S1])

    # 2. residuals on S with features projected onto the complement of beta
    yS, zS = y[S], z[S]
    r = zS - yS @ beta
    nb = np.linalg.norm(beta)
    if nb > 1e-12:
        basis = _complement_basis(beta)
    else:
        basis = np.eye(D)
    coords = yS @ basis  # coordinates of the projected features

    # 3. locally weighted slope perturbations
    if cfg.center_selection == "provided":
        if centers is None:
            raise UsageError("center_selection='provided' needs explicit centers")
        u = np.atleast_2d(np.asarray(centers, dtype=float))
        if u.shape[1] != D:
            raise UsageError(f"centers must have D = {D} columns")
        u = u - y_mean
    else:
        pick = np.random.default_rng([cfg.split_seed, 1]).choice(Q, size=cfg.K, replace=False)
        u = y[np.sort(pick)]
    u_coords = u @ basis
    if cfg.project_centers:
        dist2 = (np.sum(coords ** 2, axis=1)[:, None]
                 - 2.0 * coords @ u_coords.T
                 + np.sum(u_coords ** 2, axis=1)[None, :])
    else:
        # distance to the raw center; the beta component of u enters as an offset
        along = u @ beta / nb if nb > 1e-12 else np.zeros(len(u))
        dist2 = (np.sum(coords ** 2, axis=1)[:, None]
                 - 2.0 * coords @ u_coords.T
                 + np.sum(u_coords ** 2, axis=1)[None, :]
                 + along[None, :] ** 2)
    np.maximum(dist2, 0.0, out=dist2)
    w = np.exp(-lam * dist2)
    wsum = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        wmean = np.where(wsum > 0, (w * r[:, None]).sum(axis=0) / wsum, 0.0)
    targets = w * (r[:, None] - wmean[None, :])
    qmat, rmat = np.linalg.qr(coords)
    diag = np.abs(np.diag(rmat))
    cond = np.inf if diag.min() == 0 else diag.max() / diag.min()
    if cond > 1e12:
        raise ConditioningError(
            f"projected feature design is rank deficient (condition estimate {cond:.3e})",
            condition=cond)
    slopes = sla.solve_triangular(rmat, qmat.T @ targets)  # (D-1, K)
    P = (basis @ slopes).T

    # 4. rank-d' SVD of the slope matrix
    _, sv, vt = np.linalg.svd(P, full_matrices=False)
    A = vt[:dprime]
    return MplsResult(beta_hat=beta, A_hat=A, singular_values=sv, P_hat=P, split=(S, S1))


def constant_spline_rss(t: np.ndarray, z: np.ndarray, bins: int) -> float:
    """Residual sum of squares of a piecewise-constant fit of ``z`` on ``t``."""
    lo, hi = t.min(), t.max()
    if hi <= lo:
        return float(np.sum((z - z.mean()) ** 2))
    k = np.clip(((t - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
    counts = np.bincount(k, minlength=bins)
    sums = np.bincount(k, weights=z, minlength=bins)
    means = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    return float(np.sum((z - means[k]) ** 2))


def assemble_B(samples: RegressionSamples, beta_hat: np.ndarray, A_hat: np.ndarray,
               dprime: int, bins: int = 28) -> ReductionMap:
    """Decide whether the linear direction belongs to the reduction map.

    The linear direction competes with the d'-th nonlinear direction by the
    error of a one-dimensional piecewise-constant fit of ``z`` on the
    projected features; the better one is kept.
    """
    nb = np.linalg.norm(beta_hat)
    a_last = A_hat[dprime - 1]
    rss_a = constant_spline_rss(samples.y @ a_last, samples.z, bins)
    info = {"rss_A": rss_a}
    if nb < 1e-12:
        info["rss_beta"] = None
        return ReductionMap(A_hat[:dprime].copy(), "mpls_without_beta", info)
    b = beta_hat / nb
    rss_b = constant_spline_rss(samples.y @ b, samples.z, bins)
    info["rss_beta"] = rss_b
    if rss_b < rss_a:
        return ReductionMap(np.vstack([b, A_hat[:dprime - 1]]), "mpls_with_beta", info)
    return ReductionMap(A_hat[:dprime].copy(), "mpls_without_beta", info)


def interacting(samples: RegressionSamples, rtol: float = 1e-10) -> np.ndarray:
    """Row indices whose kernel value is nonzero relative to the largest one.

    For compactly supported kernels most pairs sit outside the support and
    carry ``z = 0`` regardless of direction; they swamp the linear fit.
    """
    a = np.abs(samples.z)
    if a.size == 0:
        return np.arange(0)
    return np.flatnonzero(a > rtol * a.max())


def estimate_reduction(samples: RegressionSamples, dprime: int,
                       cfg: MplsConfig = MplsConfig()) -> ReductionMap:
    """MPLS followed by the linear-direction decision, as one call."""
    used = samples
    if cfg.interacting_only:
        rows = interacting(samples)
        if len(rows) < len(samples):
            log.info("MPLS on %d of %d samples with nonzero kernel value", len(rows), len(samples))
            used = samples.subset(rows)
    res = mpls(used, dprime, cfg)
    B = assemble_B(used, res.beta_hat, res.A_hat, dprime, bins=cfg.constant_bins)
    B.info["singular_values"] = res.singular_values.tolist()
    B.info["samples_used"] = len(used)
    return B


def err_B(true_B: ReductionMap, est_B: ReductionMap, ord=2) -> float:
    """Distance ``|B^T B - Bh^T Bh|`` between the two row-space projections."""
    if true_B.D != est_B.D or true_B.dprime != est_B.dprime:
        raise UsageError(
            f"shape mismatch: {true_B.rows.shape} vs {est_B.rows.shape}")
    diff = true_B.rows.T @ true_B.rows - est_B.rows.T @ est_B.rows
    return float(np.linalg.norm(diff, ord=ord))
