"""Sliding-window MAP estimation with covariance hand-off.

The horizon is cut into consecutive windows of fixed length.  Each
window solves the batch MAP problem seeded by the previous window's
hand-off belief; the hand-off covariance comes from a linearized
covariance recursion along the freshly estimated trajectory (prediction
between epochs, measurement updates at epochs), so the next window
receives both a state and a calibrated uncertainty.

A window whose solve stalls or emits non-finite values is flagged and
falls back to an extended-Kalman pass over the same data, keeping the
sequence alive without pretending the solve succeeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .batch import ChebyshevTrajectory, build_problem, initial_params, solve_batch
from .lm import SolverConfig, SolveStats
from .models import GaussianBelief, SystemModel

# relative jitter applied to hand-off covariances to keep them factorizable
_PD_FLOOR = 1e-12


def _pd_floor(P):
    P = 0.5 * (P + P.T)
    return P + _PD_FLOOR * max(np.trace(P), 1e-30) * np.eye(P.shape[0])


@dataclass
class WindowConfig:
    window: float
    order: int
    cov_step: float = 0.01
    init: str = "prior"             # "prior" or "fit" (seed from a smoothed filter pass)
    strategy: str = "auto"
    smooth_covariance: bool = False  # smooth epoch covariances inside the window
    solver: SolverConfig = field(default_factory=SolverConfig)
    penalty_rounds: int = 4
    whiten_rounds: int = 3           # dynamics-whitening homotopy inside each solve

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window length must be positive")
        if self.cov_step <= 0:
            raise ValueError("cov_step must be positive")
        if self.init not in ("prior", "fit"):
            raise ValueError("init must be 'prior' or 'fit'")
        if self.whiten_rounds < 1:
            raise ValueError("whiten_rounds must be >= 1")


@dataclass
class WindowResult:
    t_start: float
    t_end: float
    trajectory: ChebyshevTrajectory
    end_belief: GaussianBelief
    epoch_times: np.ndarray
    epoch_beliefs: list
    stats: SolveStats
    flagged: bool = False
    fallback: str | None = None


def _grid_index(t, t_start, step, nsteps, what):
    idx = int(round((t - t_start) / step))
    if abs(t_start + idx * step - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"{what} at t={t} does not align with the step {step}")
    if idx < 0 or idx > nsteps:
        raise ValueError(f"{what} at t={t} outside the window")
    return idx


def propagate_covariance(
    trajectory: ChebyshevTrajectory,
    prior_cov,
    model: SystemModel,
    meas_times,
    cov_step: float,
    smooth: bool = False,
):
    """Covariance recursion along a fixed trajectory.

    Linearizes the dynamics and measurement maps on the given trajectory,
    integrates the covariance rate equation between epochs with RK4 at
    ``cov_step`` and applies a Kalman covariance update at each epoch.
    Returns a dict with the grid times, predicted and updated covariance
    stacks, the end covariance and, when ``smooth`` is set, the smoothed
    stack from a backward sweep.
    """
    tm = trajectory.time_map
    span = tm.t_end - tm.t_start
    nsteps = int(round(span / cov_step))
    if nsteps < 1 or abs(nsteps * cov_step - span) > 1e-9 * max(1.0, span):
        raise ValueError("cov_step must divide the window span")
    mt = np.asarray(meas_times, dtype=float)
    meas_idx = np.array(
        [_grid_index(t, tm.t_start, cov_step, nsteps, "measurement") for t in mt],
        dtype=np.int64,
    )
    stage_t = tm.t_start + 0.5 * cov_step * np.arange(2 * nsteps + 1)
    stage_states = trajectory.states(stage_t)
    P0 = _pd_floor(np.asarray(prior_cov, dtype=float))
    covs_p, covs_u, phis, status = kernels.cov_forward(
        model.dynamics_jac,
        model.measurement_jac,
        model.params,
        stage_states,
        P0,
        model.diffusion(),
        model.meas_cov,
        cov_step,
        meas_idx,
    )
    kernels.check_status(status, "cov_forward", cov_step)
    out = {
        "times": tm.t_start + cov_step * np.arange(nsteps + 1),
        "covs_pred": covs_p,
        "covs_upd": covs_u,
        "meas_idx": meas_idx,
        "end_cov": covs_u[-1],
    }
    if smooth:
        zeros = np.zeros((nsteps + 1, model.state_dim))
        _, sP = kernels.rts_backward(zeros, covs_u, zeros, covs_p, phis, 0, nsteps)
        out["covs_smoothed"] = sP
    return out


def _ekf_pass(model, prior, meas_times, meas_values, t_start, t_end, step):
    span = t_end - t_start
    nsteps = int(round(span / step))
    if nsteps < 1 or abs(nsteps * step - span) > 1e-9 * max(1.0, span):
        raise ValueError("cov_step must divide the window span")
    meas_idx = np.array(
        [_grid_index(t, t_start, step, nsteps, "measurement") for t in meas_times],
        dtype=np.int64,
    )
    out = kernels.ekf_forward(
        model.dynamics,
        model.dynamics_jac,
        model.measurement,
        model.measurement_jac,
        model.params,
        prior.mean,
        _pd_floor(prior.cov),
        model.diffusion(),
        model.meas_cov,
        step,
        nsteps,
        meas_idx,
        np.atleast_2d(np.asarray(meas_values, dtype=float)),
    )
    kernels.check_status(out[-1], "ekf_forward", step)
    times = t_start + step * np.arange(nsteps + 1)
    return times, out, meas_idx


def run_window(
    model: SystemModel,
    prior: GaussianBelief,
    meas_times,
    meas_values,
    t_start: float,
    t_end: float,
    cfg: WindowConfig,
) -> WindowResult:
    """Solve one window and produce the hand-off belief at its end."""
    mt = np.asarray(meas_times, dtype=float)
    mz = np.atleast_2d(np.asarray(meas_values, dtype=float))
    if mz.shape[0] != mt.shape[0]:
        if mt.shape[0] == 0:
            mz = np.empty((0, model.meas_dim))
        else:
            mz = mz.reshape(mt.shape[0], -1)

    problem = build_problem(
        model, prior, mt, mz, t_start, t_end, cfg.order, strategy=cfg.strategy
    )

    if cfg.init == "fit":
        times, ekf_out, _ = _ekf_pass(model, prior, mt, mz, t_start, t_end, cfg.cov_step)
        mp, cp, mu, cu, phis, _, _ = ekf_out
        sm, _ = kernels.rts_backward(mu, cu, mp, cp, phis, 0, mu.shape[0] - 1)
        theta0 = initial_params(problem, "fit", times, sm)
    else:
        theta0 = initial_params(problem, "prior")

    traj, stats = solve_batch(
        problem, init=theta0, config=cfg.solver,
        penalty_rounds=cfg.penalty_rounds, whiten_rounds=cfg.whiten_rounds,
    )

    failed = stats.termination == "stalled" or not np.all(np.isfinite(traj.params))
    cov_info = None
    if not failed:
        try:
            cov_info = propagate_covariance(
                traj, prior.cov, model, mt, cfg.cov_step, smooth=cfg.smooth_covariance
            )
        except (kernels.KernelError, np.linalg.LinAlgError):
            failed = True

    if failed:
        # fall back to the EKF belief so the sequence can continue
        times, ekf_out, meas_idx = _ekf_pass(
            model, prior, mt, mz, t_start, t_end, cfg.cov_step
        )
        _, _, means_u, covs_u, _, _, _ = ekf_out
        theta_fb = initial_params(problem, "fit", times, means_u)
        traj_fb = ChebyshevTrajectory(problem.time_map, problem.param_map, theta_fb)
        epoch_beliefs = [
            GaussianBelief(means_u[i], _pd_floor(covs_u[i]), times[i]) for i in meas_idx
        ]
        end = GaussianBelief(means_u[-1], _pd_floor(covs_u[-1]), t_end)
        return WindowResult(
            t_start, t_end, traj_fb, end, mt.copy(), epoch_beliefs, stats,
            flagged=True, fallback="ekf",
        )

    cov_stack = cov_info["covs_smoothed"] if cfg.smooth_covariance else cov_info["covs_upd"]
    epoch_beliefs = []
    for t, idx in zip(mt, cov_info["meas_idx"]):
        x_t, _ = traj.eval(t)
        epoch_beliefs.append(GaussianBelief(x_t, _pd_floor(cov_stack[idx]), t))
    x_end, _ = traj.eval(t_end)
    end = GaussianBelief(x_end, _pd_floor(cov_info["end_cov"]), t_end)
    return WindowResult(t_start, t_end, traj, end, mt.copy(), epoch_beliefs, stats)


def run_sequence(
    model: SystemModel,
    initial_belief: GaussianBelief,
    meas_times,
    meas_values,
    t_end: float,
    cfg: WindowConfig,
) -> list[WindowResult]:
    """Slide non-overlapping windows from the initial belief to t_end.

    A measurement on a window boundary belongs to the earlier window
    (windows cover half-open intervals (start, end]).
    """
    mt = np.asarray(meas_times, dtype=float)
    mz = np.atleast_2d(np.asarray(meas_values, dtype=float))
    if mz.shape[0] != mt.shape[0]:
        if mt.shape[0] == 0:
            mz = np.empty((0, model.meas_dim))
        else:
            mz = mz.reshape(mt.shape[0], -1)
    t0 = initial_belief.time
    if t_end <= t0:
        raise ValueError("t_end must exceed the initial belief time")
    n_windows = int(np.ceil((t_end - t0 - 1e-9) / cfg.window))

    results = []
    prior = initial_belief
    for w in range(n_windows):
        ws = t0 + w * cfg.window
        we = min(t0 + (w + 1) * cfg.window, t_end)
        sel = (mt > ws + 1e-9) & (mt <= we + 1e-9)
        res = run_window(model, prior, mt[sel], mz[sel], ws, we, cfg)
        results.append(res)
        prior = res.end_belief
    return results
