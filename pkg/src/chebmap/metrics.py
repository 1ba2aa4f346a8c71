"""Monte Carlo error and consistency metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import chi2


def rmse_per_run(errors) -> np.ndarray:
    """Time-RMSE of each run and state component.

    ``errors`` has shape (runs, epochs, n); the result is (runs, n).
    """
    e = np.asarray(errors, dtype=float)
    return np.sqrt(np.mean(e * e, axis=1))


def armse(errors) -> np.ndarray:
    """Aggregate RMSE over runs and epochs, per component.

    Equals the root of the mean squared per-run RMSE, so averaging
    order does not matter.
    """
    e = np.asarray(errors, dtype=float)
    return np.sqrt(np.mean(e * e, axis=(0, 1)))


def avg_abs_error(errors) -> np.ndarray:
    """Mean absolute error over runs and epochs, per component."""
    return np.mean(np.abs(np.asarray(errors, dtype=float)), axis=(0, 1))


def nees_series(errors, covs) -> np.ndarray:
    """Run-averaged normalized estimation error squared per epoch.

    ``errors`` (runs, epochs, n), ``covs`` (runs, epochs, n, n); the
    result is (epochs,).  A consistent estimator averages to the state
    dimension.
    """
    e = np.asarray(errors, dtype=float)
    P = np.asarray(covs, dtype=float)
    sol = np.linalg.solve(P, e[..., None])[..., 0]
    return np.mean(np.sum(e * sol, axis=-1), axis=0)


def nees_bounds(state_dim: int, n_runs: int, confidence: float = 0.95):
    """Two-sided chi-square acceptance interval for the averaged NEES."""
    dof = state_dim * n_runs
    lo = chi2.ppf(0.5 * (1.0 - confidence), dof) / n_runs
    hi = chi2.ppf(0.5 * (1.0 + confidence), dof) / n_runs
    return float(lo), float(hi)


def bound_rmse(covs) -> np.ndarray:
    """Root mean variance of a covariance stack, per component.

    ``covs`` (epochs, n, n) or (runs, epochs, n, n); variances are
    averaged over all leading axes before the root.
    """
    P = np.asarray(covs, dtype=float)
    d = np.diagonal(P, axis1=-2, axis2=-1)
    return np.sqrt(np.mean(d, axis=tuple(range(d.ndim - 1))))
