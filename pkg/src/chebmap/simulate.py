"""Truth simulation and measurement synthesis for Monte Carlo studies."""

from __future__ import annotations

import numpy as np

from . import kernels
from .models import SystemModel


def _psd_sqrt(S):
    vals, vecs = np.linalg.eigh(S)
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def simulate_truth(
    model: SystemModel,
    x0,
    horizon: float,
    dt: float,
    rng: np.random.Generator,
    t_start: float = 0.0,
):
    """Euler-Maruyama sample path of the model SDE.

    The diffusion matrix may be singular; increments are drawn through
    its symmetric PSD square root.  Returns (times, path) with the path
    on the full integration grid, shape (steps + 1, n).
    """
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("dt must divide the horizon")
    x0 = np.asarray(x0, dtype=float)
    S = _psd_sqrt(model.diffusion())
    incr = rng.standard_normal((steps, model.state_dim)) @ (S * np.sqrt(dt)).T
    path, status = kernels.em_simulate(model.dynamics, model.params, x0, dt, incr)
    kernels.check_status(status, "em_simulate", dt)
    times = t_start + dt * np.arange(steps + 1)
    return times, path


def generate_measurements(
    times: np.ndarray,
    path: np.ndarray,
    model: SystemModel,
    period: float,
    rng: np.random.Generator,
):
    """Noisy measurements of a simulated path at a fixed period.

    Epochs start one period after the path start and run to its end.
    Returns (meas_times, meas_values).
    """
    dt = times[1] - times[0]
    stride = int(round(period / dt))
    if stride < 1 or abs(stride * dt - period) > 1e-9 * max(1.0, period):
        raise ValueError("measurement period must be a multiple of the path step")
    idx = np.arange(stride, times.size, stride)
    if idx.size == 0:
        raise ValueError("horizon shorter than one measurement period")
    zbar = model.measurement_batch(np.ascontiguousarray(path[idx]), model.params)
    L = np.linalg.cholesky(model.meas_cov)
    zs = zbar + rng.standard_normal((idx.size, model.meas_dim)) @ L.T
    return times[idx], zs
