"""First-order interacting-agent dynamics.

Each agent moves according to

    dx_i/dt = (1/N) sum_{i'} Phi(x_i, x_i') (x_i' - x_i)

and trajectories are integrated with a fixed-step classical Runge-Kutta
scheme. Velocities are recorded by evaluating the right-hand side at the
recorded states, so observations carry no integration noise in the
velocity/state relation.

Kernels are vectorized callables ``kernel(xi, xj) -> values`` taking two
arrays of shape ``(..., d)`` and returning shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DivergenceError, NumericError, UsageError

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEFAULT_SUBSTEPS = 200


@dataclass(frozen=True)
class SystemSpec:
    """Parameters of a first-order system and of its initial distribution.

    ``box`` holds per-coordinate ``(lower, upper)`` bounds of the uniform
    initial distribution; every agent is drawn independently from it.
    """

    N: int
    d: int
    T: float
    L: int
    kernel: Kernel
    box: tuple = ((0.0, 1.0), (0.0, 1.0))
    seed: int = 0
    n_sub: int = DEFAULT_SUBSTEPS
    name: str = "custom"

    def __post_init__(self):
        if self.N < 2 or self.d < 1 or self.L < 2 or not self.T > 0:
            raise ConfigurationError(
                f"need N >= 2, d >= 1, L >= 2, T > 0; got N={self.N}, d={self.d}, "
                f"L={self.L}, T={self.T}")
        if self.n_sub < 1:
            raise ConfigurationError("n_sub must be positive")
        box = np.asarray(self.box, dtype=float)
        if box.shape != (self.d, 2):
            raise ConfigurationError(f"box must have shape ({self.d}, 2), got {box.shape}")
        if not np.all(np.isfinite(box)):
            raise ConfigurationError("box bounds must be finite")
        if np.any(box[:, 0] > box[:, 1]):
            raise ConfigurationError(f"box lower bound exceeds upper bound: {box.tolist()}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.L)

    def with_(self, **changes) -> "SystemSpec":
        return replace(self, **changes)


@dataclass
class TrajectorySet:
    """Observed states and velocities, both shaped ``(M, L, N, d)``."""

    states: np.ndarray
    velocities: np.ndarray
    times: np.ndarray
    spec: SystemSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.spec
        shape = (self.states.shape[0], s.L, s.N, s.d)
        if self.states.shape != shape or self.velocities.shape != shape:
            raise UsageError(
                f"states {self.states.shape} / velocities {self.velocities.shape} "
                f"do not match M x L x N x d = {shape}")

    @property
    def M(self) -> int:
        return self.states.shape[0]


def trajectory_rng(seed: int, m: int) -> np.random.Generator:
    """Independent generator for trajectory ``m``, stable under changes of M."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))


def derive_seed(master: int, *keys: int) -> int:
    """Derive a child integer seed from a master seed and integer keys."""
    ss = np.random.SeedSequence([int(master), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sample_initial_conditions(spec: SystemSpec, M: int, start: int = 0) -> np.ndarray:
    """Draw ``M`` initial configurations of shape ``(N, d)`` from the box.

    Trajectory ``start + m`` always receives the same draw for a given
    ``spec.seed``, so extending ``M`` never reshuffles earlier ones.
    """
    if M < 0:
        raise UsageError("M must be non-negative")
    box = np.asarray(spec.box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    out = np.empty((M, spec.N, spec.d))
    for m in range(M):
        u = trajectory_rng(spec.seed, start + m).random((spec.N, spec.d))
        out[m] = lo + (hi - lo) * u
    return out


def _pair_index(N):
    # ordered off-diagonal pairs, grouped by i: row i holds partners i' != i
    i = np.repeat(np.arange(N), N - 1)
    j = np.array([jj for ii in range(N) for jj in range(N) if jj != ii], dtype=int)
    return i, j


def interaction_rhs(kernel: Kernel, x: np.ndarray) -> np.ndarray:
    """Right-hand side for states ``x`` of shape ``(..., N, d)``.

    The diagonal i' = i is skipped, so the kernel is never evaluated at
    coincident arguments of the same agent.
    """
    N = x.shape[-2]
    i, j = _pair_index(N)
    xi = x[..., i, :]
    xj = x[..., j, :]
    phi = np.asarray(kernel(xi, xj), dtype=float)
    bad = ~np.isfinite(phi)
    if bad.any():
        finite_in = np.isfinite(xi).all(-1) & np.isfinite(xj).all(-1)
        offending = bad & finite_in
        if offending.any():
            k = np.argwhere(offending)[0]
            p = int(k[-1])
            raise NumericError(
                f"non-finite kernel value for agent pair ({i[p]}, {j[p]})",
                pair=(int(i[p]), int(j[p])))
    terms = phi[..., None] * (xj - xi)
    terms = terms.reshape(*x.shape[:-2], N, N - 1, x.shape[-1])
    return terms.sum(axis=-2) / N


def rhs(spec: SystemSpec, state: np.ndarray) -> np.ndarray:
    """Velocity of every agent for a state of shape ``(N, d)`` or ``(N*d,)``."""
    x = np.asarray(state, dtype=float)
    flat = x.ndim == 1
    x = x.reshape(spec.N, spec.d) if flat else x
    v = interaction_rhs(spec.kernel, x)
    return v.reshape(-1) if flat else v


def rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(kernel: Kernel, x0: np.ndarray, times: np.ndarray, n_sub: int,
              strict: bool = True):
    """Integrate a batch ``x0`` of shape ``(B, N, d)`` through ``times``.

    Returns ``(states, ok)`` with states shaped ``(B, len(times), N, d)`` and
    ``ok`` flagging batch members that stayed finite. With ``strict`` a
    non-finite state raises :class:`DivergenceError` instead.
    """
    f = lambda x: interaction_rhs(kernel, x)  # noqa: E731
    x = np.array(x0, dtype=float)
    out = np.empty((x.shape[0], len(times)) + x.shape[1:])
    out[:, 0] = x
    ok = np.isfinite(x).all(axis=(-2, -1))
    for l in range(1, len(times)):
        h = (times[l] - times[l - 1]) / n_sub
        for s in range(n_sub):
            x = rk4_step(f, x, h)
        finite = np.isfinite(x).all(axis=(-2, -1))
        if not finite.all():
            if strict:
                b = int(np.argmin(finite))
                raise DivergenceError(
                    f"non-finite state in trajectory {b} before t={times[l]:g}",
                    time=float(times[l]), trajectory=b)
            ok &= finite
            # freeze diverged members so the rest of the batch keeps going
            x = np.where(finite[:, None, None], x, 0.0)
        out[:, l] = x
    return out, ok


def simulate(spec: SystemSpec, x0: np.ndarray):
    """Integrate a single initial condition over the observation times.

    Returns ``(states, velocities)`` each of shape ``(L, N, d)``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(spec.N, spec.d)
    if not np.isfinite(x0).all():
        raise UsageError("initial condition must be finite")
    states, _ = integrate(spec.kernel, x0[None], spec.times, spec.n_sub)
    states = states[0]
    return states, interaction_rhs(spec.kernel, states)


def simulate_batch(spec: SystemSpec, x0: np.ndarray, chunk: int = 10000):
    """Vectorized :func:`simulate` over a batch of shape ``(B, N, d)``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1, spec.N, spec.d)
    states = np.empty((x0.shape[0], spec.L, spec.N, spec.d))
    for a in range(0, x0.shape[0], chunk):
        b = min(a + chunk, x0.shape[0])
        try:
            states[a:b], _ = integrate(spec.kernel, x0[a:b], spec.times, spec.n_sub)
        except DivergenceError as err:
            raise DivergenceError(f"trajectory {a + err.trajectory}: {err}",
                                  time=err.time, trajectory=a + err.trajectory) from err
    return states, interaction_rhs(spec.kernel, states)


def generate_dataset(spec: SystemSpec, M: int) -> TrajectorySet:
    """Simulate ``M`` independent trajectories from fresh initial conditions."""
    x0 = sample_initial_conditions(spec, M)
    if M == 0:
        empty = np.empty((0, spec.L, spec.N, spec.d))
        return TrajectorySet(empty, empty.copy(), spec.times, spec)
    states, velocities = simulate_batch(spec, x0)
    return TrajectorySet(states, velocities, spec.times, spec)
