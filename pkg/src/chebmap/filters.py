"""Baseline estimators: EKF, UKF, ERTS smoother, fixed-lag ERTS, CRLB.

All of them share one time discretization: the horizon is a uniform
grid of integration substeps and every measurement epoch must land on a
grid point.  The continuous-discrete filters integrate mean and
covariance with RK4 between epochs and apply discrete updates at the
epochs; the smoothers run Rauch-Tung-Striebel sweeps over the stored
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .models import GaussianBelief, SystemModel


def time_grid(t_start: float, t_end: float, step: float, meas_times):
    """Uniform substep grid with epoch indices.

    Returns (nsteps, meas_idx).  Raises if the span is not an integer
    number of steps or an epoch falls off the grid.
    """
    span = t_end - t_start
    nsteps = int(round(span / step))
    if nsteps < 1 or abs(nsteps * step - span) > 1e-9 * max(1.0, span):
        raise ValueError("step must divide the horizon")
    idx = []
    for t in np.asarray(meas_times, dtype=float):
        i = int(round((t - t_start) / step))
        if abs(t_start + i * step - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"measurement at t={t} does not align with step {step}")
        if i < 0 or i > nsteps:
            raise ValueError(f"measurement at t={t} outside the horizon")
        idx.append(i)
    return nsteps, np.asarray(idx, dtype=np.int64)


def _as_meas_matrix(meas_values, n_meas, meas_dim):
    z = np.atleast_2d(np.asarray(meas_values, dtype=float))
    if n_meas == 0:
        return np.empty((0, meas_dim))
    if z.shape[0] != n_meas:
        z = z.reshape(n_meas, -1)
    return np.ascontiguousarray(z)


@dataclass
class FilterTrace:
    """Forward-pass record on the substep grid (posterior == prior between epochs)."""

    times: np.ndarray
    means_pred: np.ndarray
    covs_pred: np.ndarray
    means_upd: np.ndarray
    covs_upd: np.ndarray
    meas_idx: np.ndarray
    innovations: np.ndarray
    phis: np.ndarray | None = None  # per-substep transition factors (EKF only)

    def epoch_means(self):
        return self.means_upd[self.meas_idx]

    def epoch_covs(self):
        return self.covs_upd[self.meas_idx]


def ekf_cd(
    model: SystemModel,
    prior: GaussianBelief,
    meas_times,
    meas_values,
    t_end: float,
    step: float,
) -> FilterTrace:
    """Continuous-discrete extended Kalman filter."""
    nsteps, meas_idx = time_grid(prior.time, t_end, step, meas_times)
    zs = _as_meas_matrix(meas_values, meas_idx.size, model.meas_dim)
    mp, cp, mu, cu, phis, innov, status = kernels.ekf_forward(
        model.dynamics,
        model.dynamics_jac,
        model.measurement,
        model.measurement_jac,
        model.params,
        prior.mean,
        prior.cov,
        model.diffusion(),
        model.meas_cov,
        step,
        nsteps,
        meas_idx,
        zs,
    )
    kernels.check_status(status, "ekf_forward", step)
    times = prior.time + step * np.arange(nsteps + 1)
    return FilterTrace(times, mp, cp, mu, cu, meas_idx, innov, phis)


def ukf_cd(
    model: SystemModel,
    prior: GaussianBelief,
    meas_times,
    meas_values,
    t_end: float,
    step: float,
    alpha: float = 1e-3,
    beta: float = 2.0,
    kappa: float = 0.0,
) -> FilterTrace:
    """Continuous-discrete unscented Kalman filter (sigma points through RK4)."""
    nsteps, meas_idx = time_grid(prior.time, t_end, step, meas_times)
    zs = _as_meas_matrix(meas_values, meas_idx.size, model.meas_dim)
    mp, cp, mu, cu, innov, status = kernels.ukf_forward(
        model.dynamics,
        model.measurement,
        model.params,
        prior.mean,
        prior.cov,
        model.diffusion(),
        model.meas_cov,
        step,
        nsteps,
        meas_idx,
        zs,
        alpha,
        beta,
        kappa,
    )
    kernels.check_status(status, "ukf_forward", step)
    times = prior.time + step * np.arange(nsteps + 1)
    return FilterTrace(times, mp, cp, mu, cu, meas_idx, innov, None)


def erts_smooth(trace: FilterTrace):
    """Full-horizon Rauch-Tung-Striebel sweep over an EKF trace.

    Returns (means, covs) on the whole substep grid.
    """
    if trace.phis is None:
        raise ValueError("smoothing needs the transition factors of an EKF trace")
    n = trace.times.size - 1
    return kernels.rts_backward(
        trace.means_upd, trace.covs_upd, trace.means_pred, trace.covs_pred,
        trace.phis, 0, n,
    )


def fixed_lag_erts(trace: FilterTrace, lag: int):
    """Fixed-lag smoother: epoch k re-smoothed once epoch k+lag has arrived.

    ``lag`` counts measurement epochs.  For each epoch k the backward
    sweep starts at epoch min(k+lag, last) and stops at epoch k; the
    sweep refines the grid segment from epoch k up to (not including)
    epoch k+1, so every point carries the data of the next ``lag``
    epochs.  Points before the first epoch are refined by the first
    sweep; points after the last epoch keep the forward prediction.
    Zero lag returns the filter output; lag at or beyond the epoch
    count reproduces the full smoother.

    Returns (means, covs) on the whole substep grid.
    """
    if trace.phis is None:
        raise ValueError("smoothing needs the transition factors of an EKF trace")
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    means = trace.means_upd.copy()
    covs = trace.covs_upd.copy()
    if lag == 0:
        return means, covs
    m = trace.meas_idx.size
    nsteps = trace.times.size - 1
    for k in range(m):
        j = min(k + lag, m - 1)
        i0 = 0 if k == 0 else int(trace.meas_idx[k])
        i1 = int(trace.meas_idx[j])
        if i1 <= i0:
            continue
        last = nsteps if k == m - 1 else int(trace.meas_idx[k + 1]) - 1
        keep = min(last, i1) - i0 + 1
        sm, sP = kernels.rts_backward(
            trace.means_upd, trace.covs_upd, trace.means_pred, trace.covs_pred,
            trace.phis, i0, i1,
        )
        means[i0 : i0 + keep] = sm[:keep]   # the sweep output is indexed from i0
        covs[i0 : i0 + keep] = sP[:keep]
    return means, covs


def crlb_smoother(
    model: SystemModel,
    stage_states: np.ndarray,
    prior_cov: np.ndarray,
    step: float,
    meas_idx: np.ndarray,
):
    """Posterior Cramer-Rao bound via a covariance recursion along the truth.

    ``stage_states`` holds the reference states at half-step resolution,
    shape (2*nsteps + 1, n).  Runs the linearized covariance prediction
    and epoch updates along that path, then a backward smoothing sweep.
    Returns the smoothed covariance stack on the substep grid.
    """
    covs_p, covs_u, phis, status = kernels.cov_forward(
        model.dynamics_jac,
        model.measurement_jac,
        model.params,
        np.asarray(stage_states, dtype=float),
        np.asarray(prior_cov, dtype=float),
        model.diffusion(),
        model.meas_cov,
        step,
        np.asarray(meas_idx, dtype=np.int64),
    )
    kernels.check_status(status, "cov_forward", step)
    nsteps = covs_u.shape[0] - 1
    zeros = np.zeros((nsteps + 1, model.state_dim))
    _, sP = kernels.rts_backward(zeros, covs_u, zeros, covs_p, phis, 0, nsteps)
    return sP
