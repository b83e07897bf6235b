import numpy as np
import pytest
from scipy.interpolate import BSpline

from kernelscope import benchmarks
from kernelscope.dynamics import SystemSpec, _pair_index, generate_dataset
from kernelscope.errors import ConditioningError, UsageError
from kernelscope.features import extract_regression_samples, feature_map
from kernelscope.metrics import err_phi, sample_rho_T
from kernelscope.mpls import ReductionMap
from kernelscope.regression import (HypothesisSpace, KernelModel, default_space,
                                    error_functional, estimate_support, evaluate_kernel,
                                    fit_kernel, normal_system, optimal_basis_count,
                                    projected_pairs, solve_normal)

from conftest import constant_kernel

SQRT3 = np.sqrt(3.0)


def test_optimal_basis_count():
    assert optimal_basis_count(5, 50000, 1) == (28, 28)
    assert optimal_basis_count(5, 50000, 2) == (142, 12)
    assert optimal_basis_count(3, 1, 1)[0] == 2
    with pytest.raises(UsageError):
        optimal_basis_count(1, 2, 1)


def test_estimate_support():
    lo, hi = estimate_support(np.array([0.1, 0.5, 0.9]))
    np.testing.assert_allclose([lo[0], hi[0]], [0.092, 0.908], rtol=1e-12)
    lo, hi = estimate_support(np.full((4, 1), 2.5))
    np.testing.assert_allclose([lo[0], hi[0]], [2.5 - 5e-7, 2.5 + 5e-7], rtol=0, atol=1e-15)
    lo, hi = estimate_support(np.array([[0.0, 1.0], [1.0, 1.0]]))
    assert hi[1] - lo[1] == pytest.approx(1e-6)
    with pytest.raises(UsageError):
        estimate_support(np.empty((0, 1)))


def test_pl_support_geometric_bound(small_data):
    b, data = small_data["pl"]
    xi = b.true_B.project(extract_regression_samples(data).y)
    assert xi.min() >= -1e-12 and xi.max() <= 2 / (2 * SQRT3) + 1e-12


def test_space_validation():
    with pytest.raises(UsageError):
        HypothesisSpace("splines", 1, 0, 1, 4)
    with pytest.raises(UsageError):
        HypothesisSpace("piecewise_polynomial", 1, 0, 1, 5)
    with pytest.raises(UsageError):
        HypothesisSpace("clamped_bspline", 3, 0, 1, 3)
    with pytest.raises(UsageError):
        HypothesisSpace("clamped_bspline", 1, 1, 1, 3)
    sp2 = HypothesisSpace.uniform("clamped_bspline", 1, [0, 0], [1, 1], total=142, dprime=2)
    assert sp2.counts == (12, 12) and sp2.n_total == 144
    sp0 = HypothesisSpace.uniform("piecewise_polynomial", 0, 0, 1, total=28)
    assert sp0.counts == (28,) and sp0.intervals(0) == 28


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_bspline_design_matches_scipy(k):
    sp = HypothesisSpace("clamped_bspline", k, 0.2, 1.7, 9)
    x = np.linspace(0.2, 1.7, 301)
    want = BSpline.design_matrix(x, sp.knots(0), k).toarray()
    np.testing.assert_allclose(sp.design(x[:, None]).toarray(), want, atol=1e-14)


@pytest.mark.parametrize("family,k,n", [("clamped_bspline", 1, 6), ("clamped_bspline", 2, 7),
                                        ("piecewise_polynomial", 0, 5),
                                        ("piecewise_polynomial", 2, 9)])
def test_partition_of_unity_and_zero_outside(family, k, n):
    sp = HypothesisSpace(family, k, -1.0, 2.0, n)
    x = np.linspace(-1.0, 2.0, 97)
    ones = np.linalg.lstsq(sp.design(x[:, None]).toarray(), np.ones_like(x), rcond=None)[0]
    model = KernelModel(sp, ones, ReductionMap([[1.0, 0.0]]))
    np.testing.assert_allclose(model.reduced(x[:, None]), 1.0, atol=1e-12)
    assert np.all(model.reduced(np.array([[-1.001], [2.001], [50.0]])) == 0.0)
    y = np.array([[0.5, 3.0], [-2.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(evaluate_kernel(model, y), [1.0, 0.0, 1.0], atol=1e-12)


def test_tensor_evaluation_matches_design():
    sp = HypothesisSpace("clamped_bspline", 1, [0.0, -1.0], [1.0, 1.0], (5, 4))
    rng = np.random.default_rng(0)
    coef = rng.normal(size=sp.n_total)
    xi = rng.uniform([-0.1, -1.1], [1.1, 1.1], size=(500, 2))
    model = KernelModel(sp, coef, ReductionMap(np.eye(3)[:2]))
    np.testing.assert_allclose(model.reduced(xi), sp.design(xi) @ coef, atol=1e-13)


def _direct_E(data, model):
    # independent loop-free evaluation of the trajectory error functional
    N = data.spec.N
    i, j = _pair_index(N)
    x, v = data.states, data.velocities
    psi = model.evaluate(feature_map(x[:, :, i], x[:, :, j]))
    terms = psi[..., None] * (x[:, :, j] - x[:, :, i])
    pred = terms.reshape(*x.shape[:2], N, N - 1, -1).sum(axis=3) / N
    return float(np.sum((v - pred) ** 2) / (N * x.shape[0] * x.shape[1]))


@pytest.mark.parametrize("N", [2, 3])
def test_constant_kernel_recovery(N):
    spec = SystemSpec(N=N, d=2, T=1.0, L=5, kernel=constant_kernel(0.7), seed=2, n_sub=10)
    data = generate_dataset(spec, 60)
    B = benchmarks.get("pl").true_B
    xi = projected_pairs(data, B).reshape(-1, 1)
    sp = default_space(xi, 5, 60, 1, "clamped_bspline", 1, n_override=6)
    model = fit_kernel(data, B, sp)
    grid = np.linspace(sp.lo[0], sp.hi[0], 50)[:, None]
    np.testing.assert_allclose(model.reduced(grid), 0.7, atol=1e-8)


def test_knot_aligned_exact_recovery():
    b = benchmarks.get("od")
    data = generate_dataset(b.system(seed=21, n_sub=20), 3000)
    # breakpoints at both jumps: 0, 1/(4 sqrt 3), 2/(4 sqrt 3), 3/(4 sqrt 3)
    sp = HypothesisSpace("piecewise_polynomial", 0, 0.0, 3 / (4 * SQRT3), 3)
    model = fit_kernel(data, b.true_B, sp)
    np.testing.assert_allclose(model.coefficients, [0.1, 1.0, 0.0], atol=1e-10)
    rho = sample_rho_T(b.system(seed=22, n_sub=20), 300)
    assert err_phi(b.true_B, b.true_phi, model, rho)[1] <= 1e-6


@pytest.fixture(scope="module")
def pl_fit():
    b = benchmarks.get("pl")
    data = generate_dataset(b.system(seed=31, n_sub=20), 300)
    xi = b.true_B.project(extract_regression_samples(data).y)
    sp = default_space(xi, 5, 300, 1, "clamped_bspline", 1, n_override=12)
    A, rhs, c0 = normal_system(data, b.true_B, sp)
    model = fit_kernel(data, b.true_B, sp)
    return b, data, sp, A, rhs, c0, model


def test_normal_equation_residual(pl_fit):
    _, _, _, A, rhs, _, model = pl_fit
    res = A @ model.coefficients - rhs
    assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(rhs)


def test_quadratic_form_matches_direct_functional(pl_fit):
    _, data, sp, A, rhs, c0, model = pl_fit
    rng = np.random.default_rng(3)
    for coef in [model.coefficients, rng.normal(size=sp.n_total)]:
        m = KernelModel(sp, coef, model.reduction)
        assert error_functional(coef, A, rhs, c0) == pytest.approx(_direct_E(data, m), rel=1e-10)


def test_finite_difference_gradient(pl_fit):
    _, data, sp, A, rhs, _, model = pl_fit
    rng = np.random.default_rng(4)
    c = model.coefficients + rng.normal(scale=0.3, size=sp.n_total)
    grad = 2.0 * (A @ c - rhs)
    h = 1e-4
    for k in rng.choice(sp.n_total, size=10, replace=False):
        e = np.zeros(sp.n_total)
        e[k] = h
        up = _direct_E(data, KernelModel(sp, c + e, model.reduction))
        dn = _direct_E(data, KernelModel(sp, c - e, model.reduction))
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[k]) <= 1e-5 * max(abs(grad[k]), 1e-3)


def test_objective_is_global_minimum(pl_fit):
    _, _, sp, A, rhs, c0, model = pl_fit
    best = model.info["objective"]
    assert best <= error_functional(np.zeros(sp.n_total), A, rhs, c0)
    rng = np.random.default_rng(5)
    for _ in range(20):
        c = model.coefficients + rng.normal(scale=rng.choice([1e-3, 0.1, 1.0]), size=sp.n_total)
        assert best <= error_functional(c, A, rhs, c0)


def test_pl_oracle_vanishes_at_unit_distance(pl_fit):
    _, _, _, _, _, _, model = pl_fit
    val = model(np.array([0.2, 0.3]), np.array([1.2, 0.3]))
    assert abs(val) <= 0.02


@pytest.mark.parametrize("family,k", [("clamped_bspline", 1), ("piecewise_polynomial", 0),
                                      ("piecewise_polynomial", 1)])
def test_refinement_monotone(pl_fit, family, k):
    b, data, sp, *_ = pl_fit
    objs = []
    for intervals in (3, 6, 12, 24):
        n = intervals + k if family == "clamped_bspline" else intervals * (k + 1)
        space = HypothesisSpace(family, k, sp.lo, sp.hi, n)
        objs.append(fit_kernel(data, b.true_B, space).info["objective"])
    assert all(b_ <= a + 1e-12 * abs(a) for a, b_ in zip(objs, objs[1:]))


def _weighted_regression(samples, B, sp):
    # independent oracle: least squares of z on the basis with weights |r|^2
    X = sp.design(B.project(samples.y)).toarray()
    w = samples.weight_basis
    coef = np.zeros(sp.n_total)
    used = np.flatnonzero(np.abs(X).sum(axis=0) > 0)
    coef[used] = np.linalg.lstsq(X[:, used] * w[:, None], samples.z * w, rcond=None)[0]
    return coef


@pytest.mark.parametrize("name", ["pl", "plwdc"])
def test_two_agent_equivalence_to_weighted_regression(small_data, name):
    b, data = small_data[name]
    s = extract_regression_samples(data)
    rng = np.random.default_rng(6)
    # an off-truth orthonormal map keeps the comparison nontrivial
    rows = np.linalg.qr((b.true_B.rows + 0.2 * rng.normal(size=b.true_B.rows.shape)).T)[0].T
    B = ReductionMap(rows, "mpls_with_beta")
    sp = default_space(B.project(s.y), 5, data.M, B.dprime, "clamped_bspline", 1,
                       n_override=9 ** B.dprime)
    fit = fit_kernel(data, B, sp).coefficients
    oracle = _weighted_regression(s, B, sp)
    np.testing.assert_allclose(fit, oracle, rtol=1e-10, atol=1e-10 * np.abs(oracle).max())


def test_empty_basis_functions_get_zero():
    b = benchmarks.get("pl")
    data = generate_dataset(b.system(seed=41, n_sub=10), 50)
    sp = HypothesisSpace("piecewise_polynomial", 0, 0.0, 5.0, 10)  # data live in [0, 0.58]
    model = fit_kernel(data, b.true_B, sp)
    assert model.info["empty_basis"] and np.all(model.coefficients[model.info["empty_basis"]] == 0)


def test_solver_errors():
    with pytest.raises(ConditioningError):
        solve_normal(np.zeros((3, 3)), np.zeros(3))
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    coef, info = solve_normal(A, np.array([1.0, 1.0]))
    assert info["ridge"] > 0 and np.all(np.isfinite(coef))


def test_dimension_mismatch():
    data = generate_dataset(benchmarks.get("pl").system(n_sub=5), 5)
    sp = HypothesisSpace("clamped_bspline", 1, 0.0, 1.0, 4)
    with pytest.raises(UsageError):
        fit_kernel(data, ReductionMap(np.eye(5)[:1]), sp)
    with pytest.raises(UsageError):
        KernelModel(sp, np.zeros(3), ReductionMap(np.eye(14)[:1]))
