"""Ground-truth benchmark systems: opinion dynamics, power law, directional power law."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import SystemSpec
from .features import feature_dim, feature_map
from .mpls import ReductionMap

SQRT3 = np.sqrt(3.0)

# common benchmark parameters
COMMON = dict(M=50000, M_transfer=500, N=2, N_transfer=20, L=5, T=1.0, d=2, D=14)


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    true_B: ReductionMap
    true_phi: Callable[[np.ndarray], np.ndarray]
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    mu0_box: tuple
    dprime: int
    v0: tuple | None = None
    basis: str = "clamped_bspline"
    degree: int = 1

    @property
    def common(self) -> dict:
        return dict(COMMON)

    def composed_kernel(self, xi, xj):
        """The kernel evaluated through the feature map and the true reduction."""
        return self.true_phi(self.true_B.project(feature_map(xi, xj)))

    def system(self, N: int = COMMON["N"], L: int = COMMON["L"], T: float = COMMON["T"],
               seed: int = 0, n_sub: int | None = None) -> SystemSpec:
        kw = {} if n_sub is None else {"n_sub": n_sub}
        return SystemSpec(N=N, d=COMMON["d"], T=T, L=L, kernel=self.kernel, box=self.mu0_box,
                          seed=seed, name=self.name, **kw)


def squared_distance_row(d: int = 2) -> np.ndarray:
    """Unit-norm feature row whose inner product with ``y`` is |xi - xj|^2 / norm."""
    row = np.zeros(feature_dim(d))
    a, b = np.triu_indices(d)
    t = d * (d + 1) // 2
    diag = np.flatnonzero(a == b)
    row[2 * d + diag] = 1.0
    row[2 * d + t + diag] = 1.0
    row[2 * d + 2 * t + np.arange(d) * (d + 1)] = -2.0
    return row / np.linalg.norm(row)


def direction_row(v0, d: int = 2) -> np.ndarray:
    """Unit-norm feature row giving <xj - xi, v0> / sqrt(2)."""
    v0 = np.asarray(v0, dtype=float)
    row = np.zeros(feature_dim(d))
    row[:d] = -v0
    row[d:2 * d] = v0
    return row / np.sqrt(2.0)


def _sqdist(xi, xj):
    r = np.asarray(xj) - np.asarray(xi)
    return np.einsum("...k,...k->...", r, r)


def _od_phi(xi):
    s = np.asarray(xi)[..., 0]
    # rounding can push |xi - xj|^2 slightly below zero; treat it as zero
    return np.where(s < 1 / (4 * SQRT3), 0.1, np.where(s < 1 / (2 * SQRT3), 1.0, 0.0))


def _od_kernel(xi, xj):
    r2 = _sqdist(xi, xj)
    return np.where(r2 < 0.5, 0.1, np.where(r2 < 1.0, 1.0, 0.0))


def _pl_phi(xi):
    s = np.asarray(xi)[..., 0]
    return np.sqrt(2 * SQRT3 * np.maximum(s, 0.0)) - 1.0


def _pl_kernel(xi, xj):
    return np.sqrt(_sqdist(xi, xj)) - 1.0


def build_OD() -> BenchmarkSpec:
    B = ReductionMap(squared_distance_row()[None], "oracle")
    return BenchmarkSpec("OD", B, _od_phi, _od_kernel, ((0.0, 5.0), (0.0, 5.0)), 1,
                         basis="piecewise_polynomial", degree=0)


def build_PL() -> BenchmarkSpec:
    B = ReductionMap(squared_distance_row()[None], "oracle")
    return BenchmarkSpec("PL", B, _pl_phi, _pl_kernel, ((0.0, 1.0), (0.0, 1.0)), 1)


def build_PLwDC(v0=(1.0, 0.0)) -> BenchmarkSpec:
    v = np.asarray(v0, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError(f"v0 must be a unit vector, got norm {np.linalg.norm(v)}")
    B = ReductionMap(np.vstack([squared_distance_row(), direction_row(v)]), "oracle")

    def phi(xi):
        xi = np.asarray(xi)
        s1, s2 = xi[..., 0], xi[..., 1]
        return ((np.sqrt(2 * SQRT3 * np.maximum(s1, 0.0)) - 1.0)
                * np.exp((2 / np.pi) * np.arctan(np.sqrt(2.0) * s2)))

    def kernel(xi, xj):
        r = np.asarray(xj) - np.asarray(xi)
        dist = np.sqrt(np.einsum("...k,...k->...", r, r))
        return (dist - 1.0) * np.exp((2 / np.pi) * np.arctan(r @ v))

    return BenchmarkSpec("PLwDC", B, phi, kernel, ((0.0, 1.0), (0.0, 1.0)), 2,
                         v0=tuple(float(c) for c in v))


REGISTRY = {"od": build_OD, "pl": build_PL, "plwdc": build_PLwDC}


def get(name: str, **kw) -> BenchmarkSpec:
    try:
        return REGISTRY[name.lower()](**kw)
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(REGISTRY)}") from None
