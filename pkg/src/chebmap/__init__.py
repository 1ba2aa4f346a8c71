"""Continuous-time MAP state estimation with Chebyshev polynomial trajectories.

The trajectory of a continuous-discrete stochastic system is represented
as a vector-valued Chebyshev series; the smoothing posterior is
maximized by nonlinear least squares over the (constant) coefficients.
Batch and sliding-window estimators are provided along with classical
continuous-discrete filter and smoother baselines and a Monte-Carlo
benchmark harness.
"""

from .accel import NUMBA_ENABLED, PURE_NUMPY_ENV, backend_name
from .batch import (
    ChebyshevTrajectory,
    MapProblem,
    build_problem,
    initial_params,
    solve_batch,
    trajectory_eval,
)
from .cheb import (
    AffineTimeMap,
    BasisEval,
    CollocationGrid,
    DomainError,
    basis_matrices,
    chebyshev_points,
    clenshaw_curtis_weights,
    coeffs_to_nodal,
    collocation_grid,
    eval_basis,
    nodal_to_coeffs,
    series_eval,
    transform_matrices,
)
from .config import ExperimentPlan, load_config, load_plan, parse_config
from .filters import FilterTrace, crlb_smoother, ekf_cd, erts_smooth, fixed_lag_erts, ukf_cd
from .harness import replay, run_monte_carlo
from .lm import SolverConfig, SolveStats, levenberg_marquardt
from .metrics import armse, avg_abs_error, bound_rmse, nees_bounds, nees_series, rmse_per_run
from .models import (
    GaussianBelief,
    MODEL_BUILDERS,
    NoisePartition,
    SystemModel,
    ballistic_reentry_model,
    linear_model,
    partition_noise,
    register_model,
    van_der_pol_model,
    with_meas_cov,
    with_spectral_density,
)
from .simulate import generate_measurements, simulate_truth
from .window import WindowConfig, WindowResult, propagate_covariance, run_sequence, run_window

__version__ = "0.1.0"

__all__ = [
    "AffineTimeMap",
    "BasisEval",
    "ChebyshevTrajectory",
    "CollocationGrid",
    "DomainError",
    "ExperimentPlan",
    "FilterTrace",
    "GaussianBelief",
    "MODEL_BUILDERS",
    "MapProblem",
    "NUMBA_ENABLED",
    "NoisePartition",
    "PURE_NUMPY_ENV",
    "SolveStats",
    "SolverConfig",
    "SystemModel",
    "WindowConfig",
    "WindowResult",
    "armse",
    "avg_abs_error",
    "backend_name",
    "ballistic_reentry_model",
    "basis_matrices",
    "bound_rmse",
    "build_problem",
    "chebyshev_points",
    "clenshaw_curtis_weights",
    "coeffs_to_nodal",
    "collocation_grid",
    "crlb_smoother",
    "ekf_cd",
    "erts_smooth",
    "eval_basis",
    "fixed_lag_erts",
    "generate_measurements",
    "initial_params",
    "levenberg_marquardt",
    "linear_model",
    "load_config",
    "load_plan",
    "nees_bounds",
    "nees_series",
    "nodal_to_coeffs",
    "parse_config",
    "partition_noise",
    "propagate_covariance",
    "register_model",
    "replay",
    "rmse_per_run",
    "run_monte_carlo",
    "run_sequence",
    "run_window",
    "series_eval",
    "simulate_truth",
    "solve_batch",
    "trajectory_eval",
    "transform_matrices",
    "ukf_cd",
    "van_der_pol_model",
    "with_meas_cov",
    "with_spectral_density",
]
