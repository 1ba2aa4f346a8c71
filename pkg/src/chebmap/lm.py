"""Damped Gauss-Newton (Levenberg-Marquardt) for nonlinear least squares.

Minimizes ||r(x)||^2 given callables for the stacked residual and its
Jacobian.  Steps solve the Marquardt-scaled normal equations, which
keeps the iteration invariant under diagonal rescaling of the
parameters; trial steps are accepted on the gain ratio between actual
and predicted cost decrease.  Everything is deterministic: identical
inputs produce bit-identical iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SolverConfig:
    max_iterations: int = 200
    cost_tol: float = 1e-10       # relative cost decrease on an accepted step
    grad_tol: float = 1e-8        # infinity norm of the gradient J'r
    step_tol: float = 1e-10       # step norm relative to the parameter norm
    init_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.1
    min_gain_ratio: float = 1e-4
    max_damping: float = 1e12

    def __post_init__(self):
        for name in (
            "cost_tol",
            "grad_tol",
            "step_tol",
            "init_damping",
            "min_gain_ratio",
            "max_damping",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.damping_increase <= 1 or not 0 < self.damping_decrease < 1:
            raise ValueError("damping factors must bracket 1")


@dataclass
class SolveStats:
    iterations: int = 0
    n_residual_evals: int = 0
    n_jacobian_evals: int = 0
    initial_cost: float = np.nan
    final_cost: float = np.nan
    final_grad_norm: float = np.nan
    termination: str = "running"
    cost_history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination in ("grad_tol", "cost_tol", "step_tol")


def levenberg_marquardt(residual_fn, jacobian_fn, x0, config: SolverConfig | None = None):
    """Minimize ||residual_fn(x)||^2 starting from x0.

    Returns (x, SolveStats).  The residual at the start point must be
    finite; non-finite trial residuals later on are treated as rejected
    steps so the solver can back away from overflow regions.
    """
    cfg = config or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    if x.ndim != 1:
        raise ValueError("x0 must be a vector")

    stats = SolveStats()
    r = np.asarray(residual_fn(x), dtype=float)
    stats.n_residual_evals += 1
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is non-finite at the start point")
    cost = float(r @ r)
    stats.initial_cost = cost
    stats.cost_history.append(cost)

    J = np.asarray(jacobian_fn(x), dtype=float)
    stats.n_jacobian_evals += 1
    g = J.T @ r
    lam = cfg.init_damping
    eye = np.eye(x.shape[0])

    while True:
        gnorm = float(np.abs(g).max(initial=0.0))
        if gnorm <= cfg.grad_tol:
            stats.termination = "grad_tol"
            break
        if stats.iterations >= cfg.max_iterations:
            stats.termination = "max_iterations"
            break
        stats.iterations += 1

        A = J.T @ J
        d = np.sqrt(np.maximum(np.diag(A), 1e-300))
        scale = 1.0 / d
        As = A * scale[:, None] * scale[None, :]
        gs = g * scale

        accepted = False
        while not accepted:
            try:
                L = np.linalg.cholesky(As + lam * eye)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_increase
                if lam > cfg.max_damping:
                    stats.termination = "stalled"
                    break
                continue
            u = np.linalg.solve(L.T, np.linalg.solve(L, -gs))
            step = scale * u

            if np.linalg.norm(step) <= cfg.step_tol * (np.linalg.norm(x) + cfg.step_tol):
                stats.termination = "step_tol"
                break

            x_try = x + step
            r_try = np.asarray(residual_fn(x_try), dtype=float)
            stats.n_residual_evals += 1
            if np.all(np.isfinite(r_try)):
                cost_try = float(r_try @ r_try)
                pred = cost - float((r + J @ step) @ (r + J @ step))
                if pred > 0:
                    rho = (cost - cost_try) / pred
                else:
                    rho = 1.0 if cost_try < cost else -1.0
                if rho > cfg.min_gain_ratio and cost_try < cost:
                    accepted = True
                    rel_decrease = (cost - cost_try) / max(cost, 1e-300)
                    x = x_try
                    r = r_try
                    cost = cost_try
                    stats.cost_history.append(cost)
                    J = np.asarray(jacobian_fn(x), dtype=float)
                    stats.n_jacobian_evals += 1
                    g = J.T @ r
                    lam = max(lam * cfg.damping_decrease, 1e-12)
                    if rel_decrease <= cfg.cost_tol:
                        stats.termination = "cost_tol"
                    break
            lam *= cfg.damping_increase
            if lam > cfg.max_damping:
                stats.termination = "stalled"
                break

        if stats.termination != "running":
            break

    stats.final_cost = cost
    stats.final_grad_norm = float(np.abs(g).max(initial=0.0))
    return x, stats
