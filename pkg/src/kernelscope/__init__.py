"""Learn interaction kernels of first-order agent systems from trajectory data.

The kernel is modeled as a function of a few linear combinations of
quadratic pair features. The combinations are found by multiplicatively
perturbed least squares; the function of them is fitted by spline least
squares over all observed velocities.
"""

from .benchmarks import BenchmarkSpec, get as get_benchmark
from .dynamics import SystemSpec, TrajectorySet, generate_dataset, simulate
from .errors import (ConditioningError, ConfigurationError, DivergenceError, KernelscopeError,
                     NumericError, UsageError)
from .features import RegressionSamples, extract_regression_samples, feature_map
from .metrics import ErrorReport, err_phi, err_traj, sample_rho_T
from .mpls import MplsConfig, ReductionMap, assemble_B, err_B, estimate_reduction, mpls
from .regression import HypothesisSpace, KernelModel, fit_kernel, optimal_basis_count

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSpec", "ConditioningError", "ConfigurationError", "DivergenceError",
    "ErrorReport", "HypothesisSpace", "KernelModel", "KernelscopeError", "MplsConfig",
    "NumericError", "ReductionMap", "RegressionSamples", "SystemSpec", "TrajectorySet",
    "UsageError", "assemble_B", "err_B", "err_phi", "err_traj", "estimate_reduction",
    "extract_regression_samples", "feature_map", "fit_kernel", "generate_dataset",
    "get_benchmark", "mpls", "optimal_basis_count", "sample_rho_T", "simulate",
]
