"""Quadratic pair features and the two-agent regression reduction."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dynamics import TrajectorySet
from .errors import UsageError

PAIR_TOLERANCE = 1e-8


def feature_dim(d: int) -> int:
    return 2 * d * d + 3 * d


@lru_cache(maxsize=None)
def _triu(d):
    return np.triu_indices(d)


def feature_map(xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    """All monomials of degree one and two in a pair of states.

    Layout along the last axis, for states of dimension d::

        [xi (d) | xj (d) | xi_a xi_b, a <= b | xj_a xj_b, a <= b | xi_a xj_b (row-major)]

    giving ``2 d^2 + 3 d`` entries. Leading axes broadcast.
    """
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    lead = np.broadcast_shapes(xi.shape, xj.shape)[:-1]
    d = xi.shape[-1]
    out = np.empty(lead + (feature_dim(d),))
    out[..., :d] = xi
    out[..., d:2 * d] = xj
    k = 2 * d
    for src in (xi, xj):
        for a, b in zip(*_triu(d)):
            np.multiply(src[..., a], src[..., b], out=out[..., k])
            k += 1
    for a in range(d):
        for b in range(d):
            np.multiply(xi[..., a], xj[..., b], out=out[..., k])
            k += 1
    return out


def swap_permutation(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Index permutation ``perm`` with ``feature_map(xj, xi) == feature_map(xi, xj)[perm]``.

    Returned together with the permutation's inverse.
    """
    t = d * (d + 1) // 2
    lin_i = np.arange(d)
    lin_j = d + np.arange(d)
    quad_i = 2 * d + np.arange(t)
    quad_j = 2 * d + t + np.arange(t)
    cross = (2 * d + 2 * t + np.arange(d * d)).reshape(d, d).T.reshape(-1)
    perm = np.concatenate([lin_j, lin_i, quad_j, quad_i, cross])
    return perm, np.argsort(perm)


def quadratic_form(rows: np.ndarray, d: int):
    """Rewrite feature-space rows as quadratic forms in the stacked pair ``u = [xi, xj]``.

    Returns ``(g, H)`` with ``rows @ feature_map(xi, xj) == g @ u + u^T H u``
    for every row; ``g`` is ``(r, 2d)`` and ``H`` is ``(r, 2d, 2d)``.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    r = rows.shape[0]
    g = rows[:, :2 * d].copy()
    H = np.zeros((r, 2 * d, 2 * d))
    k = 2 * d
    for off in (0, d):
        for a, b in zip(*_triu(d)):
            H[:, off + a, off + b] += rows[:, k]
            k += 1
    for a in range(d):
        for b in range(d):
            H[:, a, d + b] += rows[:, k]
            k += 1
    return g, H


def project_pairs(rows: np.ndarray, xi: np.ndarray, xj: np.ndarray, form=None) -> np.ndarray:
    """``rows @ feature_map(xi, xj)`` without materializing the features.

    Returns shape ``(..., r)``. ``form`` may carry a cached :func:`quadratic_form`.
    """
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    d = xi.shape[-1]
    g, H = quadratic_form(rows, d) if form is None else form
    u = np.concatenate(np.broadcast_arrays(xi, xj), axis=-1)
    out = u @ g.T
    for k in range(H.shape[0]):
        out[..., k] += np.einsum("...a,...a->...", u @ H[k], u)
    return out


@dataclass
class RegressionSamples:
    """Feature/value pairs ``(y_q, z_q)`` with the pair distance of each sample.

    ``index`` records ``(m, l, i, i')`` for every row.
    """

    y: np.ndarray
    z: np.ndarray
    weight_basis: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.z.shape[0]

    @property
    def D(self) -> int:
        return self.y.shape[1]

    def subset(self, rows) -> "RegressionSamples":
        return RegressionSamples(self.y[rows], self.z[rows], self.weight_basis[rows],
                                 self.index[rows])


def extract_regression_samples(data: TrajectorySet,
                               pair_tolerance: float = PAIR_TOLERANCE) -> RegressionSamples:
    """Turn two-agent observations into direct kernel samples.

    With two agents each velocity is half the kernel times the displacement
    to the other agent, so ``z = 2 <v_i, x_i' - x_i> / |x_i' - x_i|^2``
    recovers the kernel value at the pair exactly. Near-coincident pairs are
    dropped since ``z`` is undefined there.
    """
    if data.spec.N != 2:
        raise UsageError(f"regression reduction needs N = 2 agents, got N = {data.spec.N}")
    x, v = data.states, data.velocities
    M, L = x.shape[:2]
    # ordered pairs (0, 1) then (1, 0) for every (m, l)
    xi = np.stack([x[:, :, 0], x[:, :, 1]], axis=2)
    xj = np.stack([x[:, :, 1], x[:, :, 0]], axis=2)
    vi = np.stack([v[:, :, 0], v[:, :, 1]], axis=2)
    r = xj - xi
    dist2 = np.einsum("...k,...k->...", r, r)
    dist = np.sqrt(dist2)
    keep = dist > pair_tolerance
    with np.errstate(divide="ignore", invalid="ignore"):
        z = 2.0 * np.einsum("...k,...k->...", vi, r) / dist2
    idx = np.stack(np.meshgrid(np.arange(M), np.arange(L), np.arange(2), indexing="ij"),
                   axis=-1)
    idx = np.concatenate([idx, 1 - idx[..., 2:3]], axis=-1)
    keep = keep.reshape(-1)
    return RegressionSamples(
        y=feature_map(xi, xj).reshape(-1, feature_dim(x.shape[-1]))[keep],
        z=z.reshape(-1)[keep],
        weight_basis=dist.reshape(-1)[keep],
        index=idx.reshape(-1, 4)[keep],
    )
