"""Nonparametric estimation of the reduced kernel on the projected features.

The kernel is expanded in a finite basis (clamped B-splines or piecewise
polynomials on a uniform partition, tensorized for more than one reduced
variable) and its coefficients minimize the trajectory error functional

    E(psi) = 1/(NLM) sum_{m,l,i} | v_i - (1/N) sum_{i'} psi(B y_{i,i'}) (x_i' - x_i) |^2,

which is quadratic in the coefficients, so the fit is a single linear
normal system.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.polynomial import legendre

from .dynamics import TrajectorySet, _pair_index
from .errors import ConditioningError, UsageError
from .features import feature_map, project_pairs, quadratic_form
from .mpls import ReductionMap

log = logging.getLogger(__name__)

FAMILIES = ("piecewise_polynomial", "clamped_bspline")


def _bspline_local(x, t, k, span):
    """Nonzero B-spline values on knot span ``span`` (Cox-de Boor triangle).

    Returns ``(n, k+1)`` values of the functions ``span-k .. span``.
    """
    n = len(x)
    N = np.zeros((n, k + 1))
    N[:, 0] = 1.0
    left = np.empty((n, k + 1))
    right = np.empty((n, k + 1))
    for p in range(1, k + 1):
        left[:, p] = x - t[span + 1 - p]
        right[:, p] = t[span + p] - x
        saved = np.zeros(n)
        for r in range(p):
            denom = right[:, r + 1] + left[:, p - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, p - r] * temp
        N[:, p] = saved
    return N


def optimal_basis_count(L: int, M: int, dprime: int) -> tuple[int, int]:
    """Total and per-dimension basis counts ``ceil((LM / ln LM)^(d'/(d'+2)))``."""
    LM = L * M
    if LM < 3:
        raise UsageError("need L * M >= 3")
    total = math.ceil((LM / math.log(LM)) ** (dprime / (dprime + 2)))
    per_dim = math.ceil(total ** (1.0 / dprime) - 1e-9)
    return total, per_dim


def estimate_support(values: np.ndarray, pad: float = 0.01, min_width: float = 1e-6):
    """Bounding box of projected samples, widened by ``pad`` of the range per side.

    ``values`` has shape ``(n, d')``; returns ``(lo, hi)`` arrays.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] == 0:
        raise UsageError("cannot estimate support from no samples")
    lo, hi = v.min(axis=0), v.max(axis=0)
    rng = hi - lo
    degenerate = rng <= 0
    mid = 0.5 * (lo + hi)
    lo = np.where(degenerate, mid - 0.5 * min_width, lo - pad * rng)
    hi = np.where(degenerate, mid + 0.5 * min_width, hi + pad * rng)
    return lo, hi


@dataclass
class HypothesisSpace:
    """Span of a tensor-product basis on an axis-aligned box.

    ``counts`` are per-dimension basis counts. For clamped B-splines of
    degree k a count n gives n - k uniform intervals; for piecewise
    polynomials it must be a multiple of k + 1 and gives n / (k + 1)
    intervals, each with its own Legendre polynomials.
    """

    family: str
    degree: int
    lo: np.ndarray
    hi: np.ndarray
    counts: tuple

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        self.counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if self.family not in FAMILIES:
            raise UsageError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise UsageError("degree must be >= 0")
        if not (len(self.lo) == len(self.hi) == len(self.counts)):
            raise UsageError("support and counts must have one entry per reduced variable")
        if np.any(self.hi <= self.lo):
            raise UsageError("support box must have positive width")
        k = self.degree
        for c in self.counts:
            if self.family == "clamped_bspline" and c < k + 1:
                raise UsageError(f"clamped B-splines of degree {k} need >= {k + 1} functions")
            if self.family == "piecewise_polynomial" and (c < k + 1 or c % (k + 1)):
                raise UsageError(
                    f"piecewise polynomials of degree {k} need a multiple of {k + 1} functions")

    @classmethod
    def uniform(cls, family, degree, lo, hi, total=None, per_dim=None, dprime=1):
        """Space with about ``total`` functions, rounded to a valid per-dimension count."""
        if per_dim is None:
            per_dim = math.ceil(total ** (1.0 / dprime) - 1e-9)
        if family == "piecewise_polynomial":
            per_dim = (k1 := degree + 1) * max(1, round(per_dim / k1))
        return cls(family, degree, lo, hi, (per_dim,) * dprime)

    @property
    def dprime(self) -> int:
        return len(self.counts)

    @property
    def n_total(self) -> int:
        return int(np.prod(self.counts))

    def intervals(self, axis: int) -> int:
        c, k = self.counts[axis], self.degree
        return c - k if self.family == "clamped_bspline" else c // (k + 1)

    def knots(self, axis: int) -> np.ndarray:
        """Full knot vector (clamped) or breakpoints (piecewise) along ``axis``."""
        br = np.linspace(self.lo[axis], self.hi[axis], self.intervals(axis) + 1)
        if self.family == "piecewise_polynomial":
            return br
        k = self.degree
        return np.concatenate([np.full(k, br[0]), br, np.full(k, br[-1])])

    def inside(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi)
        return np.all((xi >= self.lo) & (xi <= self.hi), axis=-1)

    def _local_1d(self, t, axis, with_mask=False):
        # nonzero basis values (n, k+1) and their column indices (n, k+1)
        k = self.degree
        nint = self.intervals(axis)
        lo, hi = self.lo[axis], self.hi[axis]
        h = (hi - lo) / nint
        s = (t - lo) / h
        j = np.clip(np.floor(s), 0, nint - 1).astype(np.int64)
        if self.family == "piecewise_polynomial":
            vals = legendre.legvander(2.0 * (s - j) - 1.0, k)
            cols = j[:, None] * (k + 1) + np.arange(k + 1)[None, :]
        elif k == 0:
            vals, cols = np.ones((len(t), 1)), j[:, None]
        elif k == 1:
            # hat functions on uniform knots
            frac = np.clip(s - j, 0.0, 1.0)
            vals = np.stack([1.0 - frac, frac], axis=1)
            cols = np.stack([j, j + 1], axis=1)
        else:
            vals = _bspline_local(np.clip(t, lo, hi), self.knots(axis), k, j + k)
            cols = j[:, None] + np.arange(k + 1)[None, :]
        if with_mask:
            return vals, cols, (t >= lo) & (t <= hi)
        return vals, cols

    def local_basis(self, xi: np.ndarray):
        """Nonzero tensor-basis values and column indices for in-support points.

        ``xi`` is ``(n, d')``; returns ``(vals, cols)`` of shape ``(n, nnz)``.
        Callers must mask points outside the support.
        """
        xi = np.asarray(xi, dtype=float).reshape(-1, self.dprime)
        vals, cols = self._local_1d(xi[:, 0], 0)
        for a in range(1, self.dprime):
            v2, c2 = self._local_1d(xi[:, a], a)
            vals = (vals[:, :, None] * v2[:, None, :]).reshape(len(xi), -1)
            cols = (cols[:, :, None] * self.counts[a] + c2[:, None, :]).reshape(len(xi), -1)
        return vals, cols

    def design(self, xi: np.ndarray) -> sp.csr_matrix:
        """Sparse ``(n, n_total)`` basis matrix; rows outside the support are zero."""
        xi = np.asarray(xi, dtype=float).reshape(-1, self.dprime)
        n = len(xi)
        inside = self.inside(xi)
        vals, cols = self.local_basis(xi)
        vals = vals * inside[:, None]
        rows = np.repeat(np.arange(n), vals.shape[1])
        return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, self.n_total))

    def describe(self) -> dict:
        return {"basis_family": self.family, "degree": self.degree,
                "support_lo": self.lo.tolist(), "support_hi": self.hi.tolist(),
                "counts": list(self.counts), "n_total": self.n_total}


@dataclass
class KernelModel:
    """Fitted reduced kernel composed with a reduction map; zero off-support."""

    space: HypothesisSpace
    coefficients: np.ndarray
    reduction: ReductionMap
    info: dict = field(default_factory=dict)
    _form: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_total,):
            raise UsageError(
                f"expected {self.space.n_total} coefficients, got {self.coefficients.shape}")
        if self.reduction.dprime != self.space.dprime:
            raise UsageError("reduction map and hypothesis space disagree on d'")

    def reduced(self, xi: np.ndarray) -> np.ndarray:
        """Evaluate the reduced kernel at reduced variables of shape ``(..., d')``."""
        xi = np.asarray(xi, dtype=float)
        sp_ = self.space
        lead = xi.shape[:-1] if xi.ndim > 1 else xi.shape
        flat = xi.reshape(-1, sp_.dprime)
        parts = [sp_._local_1d(flat[:, a], a, with_mask=True) for a in range(sp_.dprime)]
        coef = self.coefficients.reshape(sp_.counts)
        out = np.zeros(len(flat))
        # sum over the (k+1)^d' locally nonzero tensor terms
        for combo in np.ndindex(*(p[0].shape[1] for p in parts)):
            term = coef[tuple(p[1][:, c] for p, c in zip(parts, combo))]
            for p, c in zip(parts, combo):
                term = term * p[0][:, c]
            out += term
        for p in parts:
            out *= p[2]
        return out.reshape(lead)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        """Kernel value at feature vectors ``y`` of shape ``(..., D)``."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.reduction.D:
            raise UsageError(f"features have D = {y.shape[-1]}, model expects {self.reduction.D}")
        xi = self.reduction.project(y)
        return self.reduced(xi.reshape(*y.shape[:-1], self.space.dprime))

    def __call__(self, xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
        """Pair kernel ``Phi(xi, xj)``, usable directly as a system kernel."""
        xi = np.asarray(xi, dtype=float)
        if self._form is None:
            self._form = quadratic_form(self.reduction.rows, xi.shape[-1])
        return self.reduced(project_pairs(self.reduction.rows, xi, xj, self._form))


def evaluate_kernel(model: KernelModel, y: np.ndarray) -> np.ndarray:
    return model.evaluate(y)


def _pair_arrays(data: TrajectorySet):
    N = data.spec.N
    i, j = _pair_index(N)
    return i, j


def projected_pairs(data: TrajectorySet, B: ReductionMap, chunk: int = 20000) -> np.ndarray:
    """Reduced variables ``B y`` for every ordered pair, shape ``(M, L, N, N-1, d')``."""
    i, j = _pair_arrays(data)
    x = data.states
    out = np.empty(x.shape[:2] + (len(i), B.dprime))
    for a in range(0, x.shape[0], chunk):
        xs = x[a:a + chunk]
        out[a:a + chunk] = B.project(feature_map(xs[:, :, i], xs[:, :, j]))
    N = data.spec.N
    return out.reshape(x.shape[0], x.shape[1], N, N - 1, B.dprime)


def normal_system(data: TrajectorySet, B: ReductionMap, space: HypothesisSpace,
                  chunk: int = 20000):
    """Assemble ``(A, b, c0)`` with ``E(c) = c^T A c - 2 b^T c + c0``."""
    if B.D != 2 * data.spec.d ** 2 + 3 * data.spec.d:
        raise UsageError(f"reduction map has D = {B.D}, data features need "
                         f"{2 * data.spec.d ** 2 + 3 * data.spec.d}")
    if B.dprime != space.dprime:
        raise UsageError("reduction map and hypothesis space disagree on d'")
    N, d = data.spec.N, data.spec.d
    i, j = _pair_arrays(data)
    n = space.n_total
    M, L = data.states.shape[:2]
    A = np.zeros((n, n))
    b = np.zeros(n)
    c0 = 0.0
    norm = 1.0 / (N * L * M) if M else 0.0
    for a in range(0, M, chunk):
        x = data.states[a:a + chunk]
        v = data.velocities[a:a + chunk]
        xi = B.project(feature_map(x[:, :, i], x[:, :, j])).reshape(-1, B.dprime)
        rdiff = (x[:, :, j] - x[:, :, i]).reshape(-1, d) / N
        Psi = space.design(xi)  # (pairs, n)
        # rows of G: for each (m, l, i, coordinate), sum over partners of psi * r
        P = len(xi)
        owner = np.arange(P) // (N - 1)  # (m, l, i) flat index of each pair
        nrows = P // (N - 1)
        G_parts = []
        for k in range(d):
            Rk = sp.csr_matrix((rdiff[:, k], (owner, np.arange(P))), shape=(nrows, P))
            G_parts.append(Rk @ Psi)
        G = sp.vstack(G_parts).tocsr()
        vflat = np.concatenate([v.reshape(-1, d)[:, k] for k in range(d)])
        A += (G.T @ G).toarray()
        b += G.T @ vflat
        c0 += float(vflat @ vflat)
    return A * norm, b * norm, c0 * norm


def error_functional(coef: np.ndarray, A: np.ndarray, b: np.ndarray, c0: float) -> float:
    return float(coef @ A @ coef - 2.0 * b @ coef + c0)


def solve_normal(A: np.ndarray, b: np.ndarray):
    """Solve ``A c = b`` for symmetric PSD ``A``; zero out empty basis functions."""
    n = len(b)
    diag = np.diag(A)
    scale = diag.max() if n and diag.max() > 0 else 1.0
    empty = np.flatnonzero(diag <= 1e-14 * scale)
    active = np.setdiff1d(np.arange(n), empty)
    coef = np.zeros(n)
    info = {"empty_basis": empty.tolist(), "ridge": 0.0}
    if len(empty):
        log.info("basis functions %s have no data in their support; coefficients set to 0",
                 empty.tolist())
    if len(active) == 0:
        raise ConditioningError("no basis function has data in its support", empty=empty)
    Aa = A[np.ix_(active, active)]
    ba = b[active]
    try:
        coef[active] = sla.cho_solve(sla.cho_factor(Aa), ba)
        ok = np.all(np.isfinite(coef))
    except (np.linalg.LinAlgError, sla.LinAlgError):
        ok = False
    if not ok:
        ridge = 1e-12 * np.trace(Aa)
        log.warning("normal matrix numerically singular; adding ridge %.3e", ridge)
        info["ridge"] = ridge
        try:
            coef[active] = sla.cho_solve(sla.cho_factor(Aa + ridge * np.eye(len(active))), ba)
        except (np.linalg.LinAlgError, sla.LinAlgError) as err:
            raise ConditioningError(
                f"normal matrix singular even with ridge; empty basis functions: "
                f"{empty.tolist()}", condition=np.inf, empty=empty) from err
    return coef, info


def fit_kernel(data: TrajectorySet, B: ReductionMap, space: HypothesisSpace) -> KernelModel:
    """Minimize the trajectory error functional over the span of ``space``."""
    A, b, c0 = normal_system(data, B, space)
    coef, info = solve_normal(A, b)
    info["objective"] = error_functional(coef, A, b, c0)
    return KernelModel(space, coef, B, info)


def default_space(values: np.ndarray, L: int, M: int, dprime: int, family: str,
                  degree: int, n_override: int | None = None) -> HypothesisSpace:
    """Uniform space on the estimated support with the optimal basis count."""
    lo, hi = estimate_support(values)
    total, per_dim = optimal_basis_count(L, M, dprime)
    if n_override is not None:
        total, per_dim = n_override, None
    return HypothesisSpace.uniform(family, degree, lo, hi, total=total, per_dim=per_dim,
                                   dprime=dprime)
