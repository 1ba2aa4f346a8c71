"""Monte Carlo benchmark harness.

Runs every configured estimator on identical simulated data, records
errors, consistency statistics and failures, and writes a deterministic
report plus per-estimator CSVs and SVG figures.  Timings go to a
separate file so the report bytes depend only on the experiment.

Error aggregation convention: each estimator is scored on its own
output grid (every integration substep, initial point excluded), not
just at the measurement epochs, so estimators with smooth interpolants
and estimators that only predict between updates are compared on the
whole trajectory.  Consistency (NEES) is still evaluated at the epochs,
where every estimator reports a calibrated covariance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import metrics
from .batch import build_problem, initial_params, solve_batch
from .config import ExperimentPlan, parse_config
from .filters import crlb_smoother, ekf_cd, erts_smooth, fixed_lag_erts, time_grid, ukf_cd
from .kernels import KernelError
from .models import with_spectral_density
from .simulate import generate_measurements, simulate_truth
from .window import WindowConfig, propagate_covariance, run_sequence

REPORT_SCHEMA = "chebmap-report-v1"


def _estimation_model(model, opts):
    q = opts.get("pseudo_noise")
    if q is None:
        return model
    return with_spectral_density(model, np.asarray(q, dtype=float))


def _run_cheb_batch(model, prior, mt, zs, t_end, opts, truth):
    m = _estimation_model(model, opts)
    order = opts.get("order", 100)
    strategy = opts.get("strategy", "auto")
    cov_step = opts.get("cov_step", 0.01)
    problem = build_problem(m, prior, mt, zs, prior.time, t_end, order, strategy)
    if opts.get("init", "prior") == "fit":
        trace = ekf_cd(m, prior, mt, zs, t_end, cov_step)
        sm, _ = erts_smooth(trace)
        theta0 = initial_params(problem, "fit", trace.times, sm)
    else:
        theta0 = initial_params(problem, "prior")
    traj, stats = solve_batch(
        problem, init=theta0, whiten_rounds=opts.get("whiten_rounds", 3)
    )
    if stats.termination == "stalled" or not np.all(np.isfinite(traj.params)):
        raise RuntimeError("batch solve stalled")
    info = propagate_covariance(
        traj, prior.cov, m, mt, cov_step,
        smooth=opts.get("smooth_covariance", True),
    )
    stack = info["covs_smoothed"] if opts.get("smooth_covariance", True) else info["covs_upd"]
    covs = stack[info["meas_idx"]]
    return cov_step, traj.states(info["times"]), covs, {"iterations": stats.iterations}


def _run_cheb_window(model, prior, mt, zs, t_end, opts, truth):
    m = _estimation_model(model, opts)
    cfg = WindowConfig(
        window=opts["window"],
        order=opts.get("order", 20),
        cov_step=opts.get("cov_step", 0.01),
        init=opts.get("init", "prior"),
        strategy=opts.get("strategy", "auto"),
        smooth_covariance=opts.get("smooth_covariance", False),
        whiten_rounds=opts.get("whiten_rounds", 3),
    )
    results = run_sequence(m, prior, mt, zs, t_end, cfg)
    beliefs = [b for r in results for b in r.epoch_beliefs]
    if len(beliefs) != mt.size:
        raise RuntimeError("window sequence lost measurement epochs")
    step = cfg.cov_step
    nsteps, _ = time_grid(prior.time, t_end, step, mt)
    ts = prior.time + step * np.arange(nsteps + 1)
    means = np.empty((nsteps + 1, model.state_dim))
    # window boundaries own their left endpoint except the very first
    for w, r in enumerate(results):
        lo = int(round((r.t_start - prior.time) / step))
        hi = int(round((r.t_end - prior.time) / step))
        if w > 0:
            lo += 1
        means[lo : hi + 1] = r.trajectory.states(ts[lo : hi + 1])
    covs = np.array([b.cov for b in beliefs])
    return step, means, covs, {"flagged_windows": sum(r.flagged for r in results)}


def _run_ekf(model, prior, mt, zs, t_end, opts, truth):
    step = opts.get("step", 0.01)
    trace = ekf_cd(model, prior, mt, zs, t_end, step)
    return step, trace.means_upd, trace.epoch_covs(), {}


def _run_ukf(model, prior, mt, zs, t_end, opts, truth):
    step = opts.get("step", 0.01)
    trace = ukf_cd(
        model, prior, mt, zs, t_end, step,
        alpha=opts.get("alpha", 1e-3), beta=opts.get("beta", 2.0),
        kappa=opts.get("kappa", 0.0),
    )
    return step, trace.means_upd, trace.epoch_covs(), {}


def _run_erts(model, prior, mt, zs, t_end, opts, truth):
    step = opts.get("step", 0.01)
    trace = ekf_cd(model, prior, mt, zs, t_end, step)
    ms, Ps = erts_smooth(trace)
    return step, ms, Ps[trace.meas_idx], {}


def _run_erts_fixed_lag(model, prior, mt, zs, t_end, opts, truth):
    step = opts.get("step", 0.01)
    trace = ekf_cd(model, prior, mt, zs, t_end, step)
    means, covs = fixed_lag_erts(trace, opts.get("lag", 1))
    return step, means, covs[trace.meas_idx], {}


def _run_crlb(model, prior, mt, zs, t_end, opts, truth):
    # lower bound along the true state path; an optional density floor
    # keeps the information recursion nonsingular for noise-free rows
    truth_times, truth_path = truth
    step = opts.get("step", 0.01)
    q_floor = opts.get("q_floor")
    m = model
    if q_floor is not None:
        q = np.maximum(np.diag(model.spectral_density), np.asarray(q_floor, dtype=float))
        m = with_spectral_density(model, q)
    nsteps, meas_idx = time_grid(prior.time, t_end, step, mt)
    dt = truth_times[1] - truth_times[0]
    stride = int(round(0.5 * step / dt))
    if stride < 1 or abs(stride * dt - 0.5 * step) > 1e-9 * step:
        raise ValueError("crlb step must be an even multiple of the truth step")
    stage = truth_path[::stride][: 2 * nsteps + 1]
    if stage.shape[0] != 2 * nsteps + 1:
        raise ValueError("truth path too short for the crlb grid")
    sP = crlb_smoother(m, stage, prior.cov, step, meas_idx)
    return step, sP


class _InfoBound:
    """Estimation-error lower bound averaged over the truth ensemble.

    Accumulates the expected information contributions of the linearized
    system along every simulated truth, then runs a forward information
    recursion plus a backward pass so the bound reflects all data,
    matching what the smoothing-type estimators are compared against.
    The expectation is taken on the information quantities themselves,
    before any inversion.
    """

    def __init__(self, model, prior, t_end, opts, mt):
        self.step = opts.get("step", 0.01)
        self.nsteps, self.meas_idx = time_grid(prior.time, t_end, self.step, mt)
        q_floor = opts.get("q_floor")
        m = model
        if q_floor is not None:
            q = np.maximum(np.diag(model.spectral_density), np.asarray(q_floor, dtype=float))
            m = with_spectral_density(model, q)
        self.model = m
        self.prior = prior
        self.Qinv = np.linalg.inv(m.diffusion() * self.step)
        self.Rinv = np.linalg.inv(m.meas_cov)
        n = model.state_dim
        self.sum_pqp = np.zeros((self.nsteps, n, n))
        self.sum_phi = np.zeros((self.nsteps, n, n))
        self.sum_hrh = np.zeros((self.meas_idx.size, n, n))
        self.count = 0

    def add(self, times, path):
        dt = times[1] - times[0]
        stride = int(round(self.step / dt))
        if stride < 1 or abs(stride * dt - self.step) > 1e-9 * self.step:
            raise ValueError("crlb step must be a multiple of the truth step")
        pts = path[::stride]
        if pts.shape[0] != self.nsteps + 1:
            raise ValueError("truth path too short for the crlb grid")
        par = self.model.params
        A = self.model.dynamics_jac_batch(pts[:-1], par)
        Phi = np.eye(pts.shape[1]) + self.step * A
        self.sum_phi += Phi
        self.sum_pqp += np.einsum("kab,ac,kcd->kbd", Phi, self.Qinv, Phi)
        H = self.model.measurement_jac_batch(pts[self.meas_idx], par)
        self.sum_hrh += np.einsum("kab,ac,kcd->kbd", H, self.Rinv, H)
        self.count += 1

    def finalize(self):
        """Per-component bound variances on the grid, shape (nsteps+1, n)."""
        L = self.count
        d11 = self.sum_pqp / L
        d12 = -np.swapaxes(self.sum_phi / L, 1, 2) @ self.Qinv
        hrh = {int(i): self.sum_hrh[j] / L for j, i in enumerate(self.meas_idx)}
        fwd = np.empty((self.nsteps + 1,) + self.Qinv.shape)
        fwd[0] = np.linalg.inv(self.prior.cov)
        for k in range(self.nsteps):
            d22 = self.Qinv + hrh.get(k + 1, 0.0)
            fwd[k + 1] = d22 - d12[k].T @ np.linalg.solve(fwd[k] + d11[k], d12[k])
        # information carried backward from the data after each point
        var = np.empty((self.nsteps + 1, self.Qinv.shape[0]))
        back = np.zeros_like(self.Qinv)
        var[-1] = np.diag(np.linalg.inv(fwd[-1]))
        for k in range(self.nsteps - 1, -1, -1):
            m = self.Qinv + hrh.get(k + 1, 0.0) + back
            back = d11[k] - d12[k] @ np.linalg.solve(m, d12[k].T)
            var[k] = np.diag(np.linalg.inv(fwd[k] + back))
        return var


ESTIMATOR_RUNNERS = {
    "cheb_batch": _run_cheb_batch,
    "cheb_window": _run_cheb_window,
    "ekf": _run_ekf,
    "ukf": _run_ukf,
    "erts": _run_erts,
    "erts_fixed_lag": _run_erts_fixed_lag,
}

_FAILURE_TYPES = (KernelError, RuntimeError, ValueError, np.linalg.LinAlgError)


def _hash_measurements(mt, zs):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mt).tobytes())
    h.update(np.ascontiguousarray(zs).tobytes())
    return h.hexdigest()[:16]


def _simulate_run(plan: ExperimentPlan, run: int):
    children = np.random.SeedSequence(plan.seed).spawn(plan.runs)
    truth_ss, meas_ss = children[run].spawn(2)
    truth_rng = np.random.default_rng(truth_ss)
    meas_rng = np.random.default_rng(meas_ss)
    times, path = simulate_truth(
        plan.model, plan.truth_x0, plan.horizon, plan.truth_dt, truth_rng
    )
    mt, zs = generate_measurements(times, path, plan.model, plan.meas_period, meas_rng)
    return times, path, mt, zs


def _grid_errors(means, step, t0, path, dt, mt, truth_epochs):
    """Estimate minus truth on the estimator's grid and at the epochs.

    The initial grid point is excluded from the dense error: it carries
    the prior, not an estimate.
    """
    md = np.asarray(means)
    stride = int(round(step / dt))
    if stride < 1 or abs(stride * dt - step) > 1e-9 * step:
        raise ValueError("estimator step must be a multiple of the truth step")
    truth = path[::stride]
    if md.shape != truth.shape:
        raise RuntimeError("estimator output grid does not cover the horizon")
    ep = [int(round((t - t0) / step)) for t in mt]
    return md[1:] - truth[1:], md[ep] - truth_epochs


def run_monte_carlo(plan: ExperimentPlan, out_dir=None, progress=False):
    """Execute the full study and return (report, timings) dicts.

    When ``out_dir`` is given, writes report.json, timings.json, one
    metrics_<estimator>.csv per estimator, and the figures.
    """
    names = [name for name, _ in plan.estimators]
    n = plan.model.state_dim
    L = plan.runs

    results = {name: [] for name in names}     # per run: dict or None
    failures = {name: {} for name in names}
    timings = {name: 0.0 for name in names}
    hashes = []
    epoch_times = None
    info_bound = None

    for run in range(L):
        times, path, mt, zs = _simulate_run(plan, run)
        hashes.append(_hash_measurements(mt, zs))
        if epoch_times is None:
            epoch_times = mt
        dt = times[1] - times[0]
        truth_epochs = path[[int(round((t - times[0]) / dt)) for t in mt]]

        for name, opts in plan.estimators:
            tic = time.perf_counter()
            try:
                if name == "crlb":
                    if opts.get("form", "smoother") == "recursive":
                        if info_bound is None:
                            info_bound = _InfoBound(
                                plan.model, plan.prior, plan.horizon, opts, mt
                            )
                        info_bound.add(times, path)
                        results[name].append({})
                    else:
                        _, sP = _run_crlb(
                            plan.model, plan.prior, mt, zs, plan.horizon, opts,
                            (times, path),
                        )
                        results[name].append({"cov_dense": sP})
                else:
                    runner = ESTIMATOR_RUNNERS[name]
                    step, means, Ps, extra = runner(
                        plan.model, plan.prior, mt, zs, plan.horizon, opts,
                        (times, path),
                    )
                    err, err_ep = _grid_errors(
                        means, step, plan.prior.time, path, dt, mt, truth_epochs
                    )
                    results[name].append(
                        {"err": err, "err_ep": err_ep, "cov_ep": np.asarray(Ps),
                         "extra": extra}
                    )
            except _FAILURE_TYPES as exc:
                failures[name][run] = f"{type(exc).__name__}: {exc}"
                results[name].append(None)
            timings[name] += time.perf_counter() - tic
        if progress:
            print(f"run {run + 1}/{L} done", flush=True)

    report = {
        "schema": REPORT_SCHEMA,
        "config": plan.raw,
        "n_runs": L,
        "state_dim": n,
        "epoch_times": [float(t) for t in epoch_times],
        "measurement_hashes": hashes,
        "estimators": {},
    }

    est_opts = dict(plan.estimators)
    for name in names:
        ok = [k for k in range(L) if results[name][k] is not None]
        section = {
            "n_ok": len(ok),
            "failed_runs": {str(k): failures[name][k] for k in sorted(failures[name])},
        }
        if name == "crlb" and est_opts[name].get("form", "smoother") == "recursive":
            section["form"] = "recursive"
            if ok:
                tic = time.perf_counter()
                try:
                    var = info_bound.finalize()
                except _FAILURE_TYPES as exc:
                    section["error"] = f"{type(exc).__name__}: {exc}"
                else:
                    section["armse"] = _round_list(np.sqrt(var[1:].mean(axis=0)))
                    section["bound_epoch_rmse"] = _round_rows(
                        np.sqrt(var[info_bound.meas_idx])
                    )
                timings[name] += time.perf_counter() - tic
        elif ok:
            # one row per run in run order, null where the run failed
            per_run = [None] * L
            if name == "crlb":
                P = np.array([results[name][k]["cov_dense"] for k in ok])[:, 1:]
                section["armse"] = _round_list(metrics.bound_rmse(P))
                rows = np.sqrt(np.mean(np.diagonal(P, axis1=-2, axis2=-1), axis=1))
            else:
                E = np.array([results[name][k]["err"] for k in ok])
                Eep = np.array([results[name][k]["err_ep"] for k in ok])
                P = np.array([results[name][k]["cov_ep"] for k in ok])
                section["armse"] = _round_list(metrics.armse(E))
                section["avg_abs_error"] = _round_list(metrics.avg_abs_error(E))
                rows = metrics.rmse_per_run(E)
                nees = metrics.nees_series(Eep, P)
                lo, hi = metrics.nees_bounds(n, len(ok))
                section["nees_mean"] = _round_list(nees)
                section["nees_bounds"] = [round(lo, 12), round(hi, 12)]
                section["nees_fraction_in_bounds"] = round(
                    float(np.mean((lo <= nees) & (nees <= hi))), 12
                )
            for pos, k in enumerate(ok):
                per_run[k] = _round_list(rows[pos])
            section["rmse_per_run"] = per_run
            flagged = [
                r["extra"].get("flagged_windows", 0)
                for r in (results[name][k] for k in ok)
                if "extra" in r
            ]
            if any(flagged):
                section["flagged_windows_total"] = int(np.sum(flagged))
        report["estimators"][name] = section

    if out_dir is not None:
        write_outputs(report, timings, plan, out_dir)
    return report, timings


def _round_list(a):
    return [round(float(v), 12) for v in np.asarray(a).ravel()]


def _round_rows(a):
    return [_round_list(row) for row in np.asarray(a)]


def write_outputs(report, timings, plan: ExperimentPlan, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "timings.json", "w") as fh:
        json.dump({k: round(v, 6) for k, v in timings.items()}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    for name, section in report["estimators"].items():
        path = out / f"metrics_{name}.csv"
        if section.get("form") == "recursive":
            _write_bound_csv(path, section, report["epoch_times"])
        else:
            _write_csv(path, section, report["n_runs"])
    _write_figures(report, out)


def _write_csv(path, section, n_runs):
    rows = section.get("rmse_per_run", [None] * n_runs)
    width = max((len(r) for r in rows if r), default=0)
    header = ["run"] + [f"rmse_x{j}" for j in range(width)] + ["status"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for run in range(n_runs):
            if rows[run] is None:
                w.writerow([run] + [""] * width + ["failed"])
            else:
                w.writerow([run] + list(rows[run]) + ["ok"])


def _write_bound_csv(path, section, epoch_times):
    rows = section.get("bound_epoch_rmse") or []
    width = max((len(r) for r in rows), default=0)
    header = ["epoch_time"] + [f"bound_rmse_x{j}" for j in range(width)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(epoch_times, rows):
            w.writerow([t] + list(row))


def _write_figures(report, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "chebmap"
    meta = {"Date": None}
    names = sorted(report["estimators"])
    n = report["state_dim"]

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(n, 1)
    xs = np.arange(len(names))
    for j in range(n):
        vals = [report["estimators"][k].get("armse", [np.nan] * n)[j] for k in names]
        ax.bar(xs + j * width, vals, width, label=f"x{j}")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("aggregate RMSE")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "fig_rmse.svg", metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    ts = report["epoch_times"]
    drew = False
    for k in names:
        sec = report["estimators"][k]
        if "nees_mean" in sec:
            ax.plot(ts, sec["nees_mean"], label=k, lw=1.2)
            drew = True
            lo, hi = sec["nees_bounds"]
    if drew:
        ax.axhline(lo, color="k", ls="--", lw=0.8)
        ax.axhline(hi, color="k", ls="--", lw=0.8)
        ax.axhline(n, color="k", ls=":", lw=0.8)
    ax.set_xlabel("time")
    ax.set_ylabel("average NEES")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "fig_nees.svg", metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for k in names:
        sec = report["estimators"][k]
        rows = sec.get("rmse_per_run")
        if rows:
            ax.plot([r[0] if r else np.nan for r in rows], label=k, lw=1.0)
    ax.set_xlabel("run")
    ax.set_ylabel("run RMSE (first component)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "fig_runs.svg", metadata=meta)
    plt.close(fig)


def replay(report_path, run: int):
    """Re-simulate one recorded run and re-execute the estimators.

    Verifies the regenerated measurements against the stored hash, then
    returns {estimator: {"rmse": [...], "status": ...}} for that run.
    """
    with open(report_path) as fh:
        report = json.load(fh)
    plan = parse_config(report["config"])
    if not 0 <= run < plan.runs:
        raise ValueError(f"run must be in [0, {plan.runs - 1}]")

    times, path, mt, zs = _simulate_run(plan, run)
    regenerated = _hash_measurements(mt, zs)
    recorded = report["measurement_hashes"][run]
    if regenerated != recorded:
        raise RuntimeError(
            f"measurement hash mismatch for run {run}: "
            f"{regenerated} != {recorded} (different library versions?)"
        )
    dt = times[1] - times[0]
    truth_epochs = path[[int(round((t - times[0]) / dt)) for t in mt]]

    out = {"run": run, "measurement_hash": regenerated, "estimators": {}}
    for name, opts in plan.estimators:
        if name == "crlb" and opts.get("form", "smoother") == "recursive":
            out["estimators"][name] = {
                "status": "skipped: ensemble bound has no per-run value"
            }
            continue
        try:
            if name == "crlb":
                _, sP = _run_crlb(
                    plan.model, plan.prior, mt, zs, plan.horizon, opts, (times, path)
                )
                diag = np.diagonal(sP[1:], axis1=-2, axis2=-1)
                rmse = np.sqrt(diag.mean(axis=0))
            else:
                runner = ESTIMATOR_RUNNERS[name]
                step, means, Ps, extra = runner(
                    plan.model, plan.prior, mt, zs, plan.horizon, opts, (times, path)
                )
                err, _ = _grid_errors(
                    means, step, plan.prior.time, path, dt, mt, truth_epochs
                )
                rmse = np.sqrt(np.mean(err * err, axis=0))
        except _FAILURE_TYPES as exc:
            out["estimators"][name] = {"status": f"{type(exc).__name__}: {exc}"}
            continue
        recorded = report["estimators"][name].get("rmse_per_run") or []
        out["estimators"][name] = {
            "status": "ok",
            "rmse": _round_list(rmse),
            "recorded_rmse": recorded[run] if run < len(recorded) else None,
        }
    return out
