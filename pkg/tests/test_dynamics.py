import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from kernelscope import benchmarks
from kernelscope.dynamics import (SystemSpec, TrajectorySet, derive_seed, generate_dataset,
                                  integrate, interaction_rhs, rhs, sample_initial_conditions,
                                  simulate, simulate_batch)
from kernelscope.errors import ConfigurationError, DivergenceError, NumericError, UsageError

from conftest import constant_kernel


def test_spec_validation():
    k = constant_kernel(1.0)
    for bad in (dict(N=1), dict(d=0), dict(L=1), dict(T=0.0)):
        kw = dict(N=2, d=2, T=1.0, L=5) | bad
        with pytest.raises(ConfigurationError):
            SystemSpec(kernel=k, **kw)
    with pytest.raises(ConfigurationError):
        SystemSpec(N=2, d=2, T=1.0, L=5, kernel=k, box=((1.0, 0.0), (0.0, 1.0)))
    with pytest.raises(ConfigurationError):
        SystemSpec(N=2, d=2, T=1.0, L=5, kernel=k, box=((0.0, np.inf), (0.0, 1.0)))


def test_observation_times():
    spec = SystemSpec(N=2, d=2, T=1.0, L=5, kernel=constant_kernel(1.0))
    np.testing.assert_allclose(spec.times, [0, 0.25, 0.5, 0.75, 1.0])


def test_initial_conditions_box_and_seed():
    od = benchmarks.get("od").system(seed=3)
    x = sample_initial_conditions(od, 200)
    assert x.shape == (200, 2, 2)
    assert x.min() >= 0 and x.max() <= 5
    np.testing.assert_array_equal(x, sample_initial_conditions(od, 200))
    # prefix stability when M grows
    np.testing.assert_array_equal(x[:50], sample_initial_conditions(od, 50))
    assert not np.array_equal(x, sample_initial_conditions(od.with_(seed=4), 200))


def test_degenerate_box():
    spec = SystemSpec(N=3, d=2, T=1.0, L=2, kernel=constant_kernel(1.0),
                      box=((0.7, 0.7), (0.7, 0.7)))
    np.testing.assert_array_equal(sample_initial_conditions(spec, 4), 0.7)


def test_derive_seed_distinct():
    seeds = {derive_seed(0, t, k) for t in range(10) for k in range(2)}
    assert len(seeds) == 20
    assert derive_seed(5, 1) == derive_seed(5, 1)


def test_rhs_examples():
    pl = benchmarks.get("pl").system()
    np.testing.assert_array_equal(rhs(pl, np.array([[0.0, 0.0], [1.0, 0.0]])), 0.0)
    od = benchmarks.get("od").system()
    np.testing.assert_array_equal(rhs(od, np.array([[0.0, 0.0], [3.0, 0.0]])), 0.0)
    c2 = SystemSpec(N=2, d=2, T=1.0, L=2, kernel=constant_kernel(2.0))
    np.testing.assert_array_equal(rhs(c2, np.array([[0.0, 0.0], [2.0, 0.0]])),
                                  [[2.0, 0.0], [-2.0, 0.0]])
    # flat input keeps flat output
    assert rhs(c2, np.zeros(4)).shape == (4,)


def test_rhs_skips_diagonal():
    def kernel(xi, xj):
        r = np.linalg.norm(xj - xi, axis=-1)
        return 1.0 / r  # infinite on the diagonal
    spec = SystemSpec(N=3, d=2, T=1.0, L=2, kernel=kernel)
    v = rhs(spec, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]))
    assert np.isfinite(v).all()


def test_rhs_nonfinite_kernel_reports_pair():
    def kernel(xi, xj):
        out = np.ones(np.shape(xi)[:-1])
        out[..., 3] = np.nan
        return out
    spec = SystemSpec(N=3, d=2, T=1.0, L=2, kernel=kernel)
    with pytest.raises(NumericError) as info:
        rhs(spec, np.arange(6.0).reshape(3, 2))
    assert info.value.pair == (1, 2)


def test_rhs_matches_loop():
    rng = np.random.default_rng(0)
    kernel = benchmarks.get("plwdc").kernel
    x = rng.random((5, 2))
    want = np.zeros_like(x)
    for i in range(5):
        for j in range(5):
            if i != j:
                want[i] += kernel(x[i], x[j]) * (x[j] - x[i])
    np.testing.assert_allclose(interaction_rhs(kernel, x), want / 5, rtol=1e-14, atol=1e-15)


def test_stationary_state():
    spec = benchmarks.get("pl").system()
    states, vel = simulate(spec, np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(states, np.broadcast_to([[0.0, 0.0], [1.0, 0.0]], states.shape))
    np.testing.assert_array_equal(vel, 0.0)


@pytest.mark.parametrize("c", [0.5, 1.0, 3.0])
def test_constant_kernel_closed_form(c):
    spec = SystemSpec(N=2, d=2, T=1.0, L=5, kernel=constant_kernel(c))
    x0 = np.array([[0.1, 0.2], [0.9, 0.5]])
    states, _ = simulate(spec, x0)
    w = states[:, 1] - states[:, 0]
    want = np.linalg.norm(x0[1] - x0[0]) * np.exp(-c * spec.times)
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), want, rtol=1e-10)
    # the centroid never moves
    np.testing.assert_allclose(states.mean(axis=1), np.broadcast_to(x0.mean(0), (5, 2)),
                               atol=1e-15)


def test_rk4_fourth_order():
    c = 1.0
    kernel = constant_kernel(c)
    x0 = np.array([[[0.0, 0.0], [1.0, 0.5]]])
    times = np.array([0.0, 1.0])
    exact = np.linalg.norm(x0[0, 1] - x0[0, 0]) * np.exp(-c)
    errs = []
    for n in (8, 16, 32):
        s, _ = integrate(kernel, x0, times, n)
        errs.append(abs(np.linalg.norm(s[0, -1, 1] - s[0, -1, 0]) - exact))
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 15.0 < r1 < 18.5 and 15.0 < r2 < 17.5


def test_velocity_consistency(small_data):
    for b, data in small_data.values():
        np.testing.assert_array_equal(data.velocities, interaction_rhs(b.kernel, data.states))


def test_dataset_shapes():
    b = benchmarks.get("pl")
    data = generate_dataset(b.system(seed=1, n_sub=5), 7)
    assert data.states.shape == (7, 5, 2, 2) and data.M == 7
    tr = generate_dataset(b.system(N=20, seed=1, n_sub=5), 3)
    assert tr.states.shape == (3, 5, 20, 2)
    empty = generate_dataset(b.system(), 0)
    assert empty.M == 0 and empty.states.shape == (0, 5, 2, 2)
    with pytest.raises(UsageError):
        TrajectorySet(np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 2, 2)), np.zeros(4), b.system())


def test_batch_matches_single():
    spec = benchmarks.get("plwdc").system(seed=2, n_sub=10)
    x0 = sample_initial_conditions(spec, 3)
    batch, _ = simulate_batch(spec, x0, chunk=2)
    for m in range(3):
        single, _ = simulate(spec, x0[m])
        np.testing.assert_allclose(batch[m], single, rtol=0, atol=1e-15)


def test_divergence_error():
    spec = SystemSpec(N=2, d=1, T=1.0, L=3, kernel=constant_kernel(-1e200), box=((0, 1),))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError) as info:
        simulate(spec, np.array([0.0, 1.0]))
    assert info.value.time == 0.5
    with np.errstate(over="ignore", invalid="ignore"):
        states, ok = integrate(spec.kernel, np.array([[[0.0], [1.0]], [[0.5], [0.5]]]),
                               spec.times, 200, strict=False)
    assert ok.tolist() == [False, True]


coords = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=25, deadline=None)
@given(st.lists(coords, min_size=8, max_size=8), st.integers(0, 2))
def test_convex_hull_contraction(vals, which):
    name = ["od", "pl", "plwdc"][which]
    kern = benchmarks.get(name).kernel
    # nonnegative kernels: OD as is, |.| of the others
    kernel = kern if name == "od" else (lambda a, b: np.abs(kern(a, b)))
    spec = SystemSpec(N=4, d=2, T=1.0, L=5, kernel=kernel, n_sub=50)
    x0 = np.array(vals).reshape(4, 2)
    states, _ = simulate(spec, x0)
    lo, hi = x0.min(axis=0), x0.max(axis=0)
    assert np.all(states >= lo - 1e-6) and np.all(states <= hi + 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(coords, min_size=6, max_size=6), st.permutations([0, 1, 2]))
def test_permutation_equivariance(vals, perm):
    spec = benchmarks.get("plwdc").system(N=3, n_sub=20)
    x0 = np.array(vals).reshape(3, 2)
    a, _ = simulate(spec, x0)
    b, _ = simulate(spec, x0[list(perm)])
    np.testing.assert_allclose(b, a[:, list(perm)], rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(coords, min_size=6, max_size=6), coords, coords, st.sampled_from(["od", "pl"]))
def test_translation_equivariance(vals, c1, c2, name):
    spec = benchmarks.get(name).system(N=3, n_sub=20)
    x0 = np.array(vals).reshape(3, 2)
    c = np.array([c1, c2])
    a, _ = simulate(spec, x0)
    b, _ = simulate(spec, x0 + c)
    if name == "od":
        # a pair straddling a discontinuity may flip branch under rounding
        r2 = np.sum((a[:, :, None] - a[:, None]) ** 2, axis=-1)
        assume(not np.any((np.abs(r2 - 0.5) < 1e-6) | (np.abs(r2 - 1.0) < 1e-6)))
    np.testing.assert_allclose(b, a + c, rtol=0, atol=1e-6)
