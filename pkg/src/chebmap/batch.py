"""Batch MAP trajectory estimation over one time window.

The state trajectory is a vector-valued Chebyshev series on the window
mapped to [-1, 1].  The negative log posterior splits into a prior
residual at the window start, one residual per measurement, and the
continuous dynamics defect integrated by Clenshaw-Curtis quadrature on
the collocation nodes.  All three blocks are whitened by the matrix
square roots of the corresponding inverse covariances, so the MAP
problem is an ordinary nonlinear least-squares problem in the (constant)
series coefficients, solved by Levenberg-Marquardt.

Singular process noise is handled by a change of variables that orders
noise-driven components first (see `models.partition_noise`).  Three
strategies exist for the noise-free rows:

- ``integrate-out``: when those rows are affine functions of the noisy
  components, they are represented exactly as running integrals of the
  noisy series plus anchor values, eliminating them from the dynamics
  residual (the default when the structure is present);
- ``constraint``: keep the full-state parameterization and append the
  noise-free dynamics rows as penalty residuals whose weight grows over
  a few outer rounds;
- caller-side pseudo-noise: inflate the spectral density so the
  partition becomes trivial and every row is an ordinary residual.

Both parameterizations are affine in the parameter vector, so the
trajectory Jacobians are constant and are precomputed once per problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cheb import AffineTimeMap, basis_matrices, collocation_grid, nodal_to_coeffs
from .lm import SolverConfig, SolveStats, levenberg_marquardt
from .models import (
    GaussianBelief,
    NoisePartition,
    SystemModel,
    affine_noise_free_rows,
    partition_noise,
)


@dataclass(frozen=True)
class _ParamMap:
    """Affine map from the parameter vector to trajectory values.

    x(tau) = JX(tau) theta + x_off(tau) and likewise for the time
    derivative; the matrices depend only on the basis, the partition
    and the window, never on theta.
    """

    kind: str                 # "full" or "integrated"
    order: int
    state_dim: int
    noisy_dim: int
    transform: np.ndarray
    transform_inv: np.ndarray
    affine_rows: np.ndarray | None   # A, (n - r, r)
    affine_offset: np.ndarray | None  # b, (n - r,)
    half_span: float

    @property
    def size(self) -> int:
        if self.kind == "full":
            return (self.order + 1) * self.state_dim
        return (self.state_dim - self.noisy_dim) + (self.order + 1) * self.noisy_dim

    def point_matrices(self, V, D, G):
        """JX, JXdot (K, n, p) and offsets (K, n) at the points behind V/D/G."""
        K = V.shape[0]
        n = self.state_dim
        N1 = self.order + 1
        s = self.half_span
        if self.kind == "full":
            eye = np.eye(n)
            JX = np.einsum("kI,ac->kaIc", V, eye).reshape(K, n, self.size)
            JXd = np.einsum("kI,ac->kaIc", D / s, eye).reshape(K, n, self.size)
            off = np.zeros((K, n))
            doff = np.zeros((K, n))
            return JX, JXd, off, doff

        r = self.noisy_dim
        nf = n - r
        A, b = self.affine_rows, self.affine_offset
        U1 = self.transform_inv[:, :r]
        U2 = self.transform_inv[:, r:]
        U2A = U2 @ A
        p = self.size
        JX = np.zeros((K, n, p))
        JXd = np.zeros((K, n, p))
        # anchor columns: x shifts by the noise-free basis directions
        JX[:, :, :nf] = U2[None, :, :]
        coeff = (
            U1[None, :, None, :] * V[:, None, :, None]
            + (s * U2A)[None, :, None, :] * G[:, None, :, None]
        )
        JX[:, :, nf:] = coeff.reshape(K, n, N1 * r)
        dcoeff = (
            U1[None, :, None, :] * (D / s)[:, None, :, None]
            + U2A[None, :, None, :] * V[:, None, :, None]
        )
        JXd[:, :, nf:] = dcoeff.reshape(K, n, N1 * r)
        taus_plus1 = G[:, 0]  # integral of the constant basis is tau + 1
        off = s * taus_plus1[:, None] * (U2 @ b)[None, :]
        doff = np.tile(U2 @ b, (K, 1))
        return JX, JXd, off, doff

    def constant_params(self, x_const) -> np.ndarray:
        """Parameters of the constant trajectory x(t) = x_const."""
        x = np.asarray(x_const, dtype=float)
        theta = np.zeros(self.size)
        if self.kind == "full":
            theta.reshape(self.order + 1, self.state_dim)[0] = x
            return theta
        r = self.noisy_dim
        y = self.transform @ x
        nf = self.state_dim - r
        theta[:nf] = y[r:]
        theta[nf:].reshape(self.order + 1, r)[0] = y[:r]
        return theta

    def fit_params(self, nodal_states) -> np.ndarray:
        """Parameters interpolating given state values on the Lobatto grid.

        Exact for the full parameterization; for the integrated one the
        noisy components interpolate and the noise-free ones anchor at
        the window start and follow their integral representation.
        """
        Xn = np.asarray(nodal_states, dtype=float)
        if Xn.shape != (self.order + 1, self.state_dim):
            raise ValueError("nodal states must be (order + 1, state_dim)")
        if self.kind == "full":
            return nodal_to_coeffs(Xn).ravel()
        r = self.noisy_dim
        Y = Xn @ self.transform.T
        C = nodal_to_coeffs(Y[:, :r])
        theta = np.empty(self.size)
        nf = self.state_dim - r
        theta[:nf] = Y[0, r:]
        theta[nf:] = C.ravel()
        return theta

    def series_coefficients(self, theta) -> np.ndarray:
        """The Chebyshev coefficient matrix being optimized.

        (order+1, state_dim) for the full parameterization, else
        (order+1, noisy_dim) for the noisy-component series.
        """
        theta = np.asarray(theta, dtype=float)
        if self.kind == "full":
            return theta.reshape(self.order + 1, self.state_dim).copy()
        nf = self.state_dim - self.noisy_dim
        return theta[nf:].reshape(self.order + 1, self.noisy_dim).copy()


def _whitener(cov, name):
    """W' with W W' = cov^{-1}; returns the transpose factor applied to residuals."""
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError as err:
        raise ValueError(f"{name} must be positive definite") from err
    return np.linalg.inv(L)


@dataclass
class MapProblem:
    """One window's MAP problem with all constant matrices precomputed."""

    model: SystemModel
    partition: NoisePartition
    prior: GaussianBelief
    time_map: AffineTimeMap
    order: int
    strategy: str
    param_map: _ParamMap
    meas_times: np.ndarray
    meas_values: np.ndarray
    # constant pieces
    sqrt_node_weights: np.ndarray
    prior_white: np.ndarray      # inv chol of P0, transposed factor
    meas_white: np.ndarray       # inv chol of R
    dyn_white: np.ndarray        # inv chol of the noisy covariance rate, times T rows
    free_rows: np.ndarray | None  # noise-free rows of T (penalty strategy)
    penalty_weight: float
    JX_nodes: np.ndarray
    JXd_nodes: np.ndarray
    Xoff_nodes: np.ndarray
    Xdoff_nodes: np.ndarray
    JX_meas: np.ndarray
    Xoff_meas: np.ndarray

    @property
    def n_params(self) -> int:
        return self.param_map.size

    @property
    def n_nodes(self) -> int:
        return self.order + 1

    @property
    def n_residuals(self) -> int:
        n = self.model.state_dim
        r = self.partition.noisy_dim
        nres = n + self.meas_values.size + self.n_nodes * r
        if self.free_rows is not None:
            nres += self.n_nodes * (n - r)
        return nres

    def states_at_nodes(self, theta):
        X = self.JX_nodes @ theta + self.Xoff_nodes
        Xd = self.JXd_nodes @ theta + self.Xdoff_nodes
        return X, Xd

    def states_at_meas(self, theta):
        return self.JX_meas @ theta + self.Xoff_meas


def build_problem(
    model: SystemModel,
    prior: GaussianBelief,
    meas_times,
    meas_values,
    t_start: float,
    t_end: float,
    order: int,
    strategy: str = "auto",
    penalty_weight: float | None = None,
) -> MapProblem:
    """Assemble the MAP problem for one window.

    ``strategy`` is one of "auto", "integrate-out", "constraint" or
    "full".  "auto" picks integrate-out when the noise partition is
    singular and the noise-free rows are affine, full when the noise is
    already full-rank, and raises otherwise so the caller can choose
    between the constraint penalty and pseudo-noise explicitly.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    tmap = AffineTimeMap(float(t_start), float(t_end))
    mt = np.asarray(meas_times, dtype=float).ravel()
    mz = np.atleast_2d(np.asarray(meas_values, dtype=float))
    if mz.shape[0] != mt.shape[0]:
        if mt.shape[0] == 0:
            mz = np.empty((0, model.meas_dim))
        else:
            mz = mz.reshape(mt.shape[0], -1)
    if mz.shape != (mt.shape[0], model.meas_dim):
        raise ValueError("measurement array shape does not match the model")
    if mt.size and (np.any(np.diff(mt) <= 0)):
        raise ValueError("measurement times must be strictly increasing")
    if mt.size and (mt[0] <= t_start - 1e-9 or mt[-1] > t_end + 1e-9):
        raise ValueError("measurements must lie inside the window")

    part = partition_noise(model)
    n = model.state_dim
    r = part.noisy_dim

    if strategy == "auto":
        strategy = "full" if r == n else "integrate-out"
        if strategy == "integrate-out":
            probe = _probe_states(prior)
            if affine_noise_free_rows(model, part, probe) is None:
                raise ValueError(
                    "noise-free dynamics rows are not affine in the noisy "
                    "components; pass strategy='constraint' or inflate the "
                    "spectral density (pseudo-noise) instead"
                )

    if strategy == "full":
        if r != n:
            raise ValueError(
                "strategy 'full' needs a full-rank noise covariance rate; "
                "inflate the spectral density or pick another strategy"
            )
        pmap = _ParamMap("full", order, n, n, part.transform, part.transform_inv,
                         None, None, tmap.half_span)
        free_rows = None
    elif strategy == "integrate-out":
        if r == n:
            raise ValueError("nothing to integrate out: noise already full rank")
        out = affine_noise_free_rows(model, part, _probe_states(prior))
        if out is None:
            raise ValueError(
                "noise-free dynamics rows are not affine in the noisy components"
            )
        A, b = out
        pmap = _ParamMap("integrated", order, n, r, part.transform,
                         part.transform_inv, A, b, tmap.half_span)
        free_rows = None
    elif strategy == "constraint":
        if r == n:
            raise ValueError("no noise-free rows to constrain")
        pmap = _ParamMap("full", order, n, r, part.transform, part.transform_inv,
                         None, None, tmap.half_span)
        free_rows = part.transform[r:, :].copy()
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    grid = collocation_grid(order)
    Vn, Dn, Gn = basis_matrices(order, grid.nodes)
    taus_meas = tmap.forward(mt) if mt.size else np.empty(0)
    Vz, Dz, Gz = basis_matrices(order, taus_meas)

    JXn, JXdn, offn, doffn = pmap.point_matrices(Vn, Dn, Gn)
    JXz, _, offz, _ = pmap.point_matrices(Vz, Dz, Gz)

    dyn_white = _whitener(part.noise_cov_noisy, "noisy covariance rate") @ part.transform[:r, :]

    if penalty_weight is None:
        # start the constraint rows at the scale of the dynamics rows
        penalty_weight = float(np.linalg.norm(dyn_white) / np.sqrt(r))

    return MapProblem(
        model=model,
        partition=part,
        prior=prior,
        time_map=tmap,
        order=order,
        strategy=strategy,
        param_map=pmap,
        meas_times=mt,
        meas_values=mz,
        sqrt_node_weights=np.sqrt(tmap.half_span * grid.weights),
        prior_white=_whitener(prior.cov, "prior covariance"),
        meas_white=_whitener(model.meas_cov, "measurement covariance"),
        dyn_white=dyn_white,
        free_rows=free_rows,
        penalty_weight=penalty_weight,
        JX_nodes=JXn,
        JXd_nodes=JXdn,
        Xoff_nodes=offn,
        Xdoff_nodes=doffn,
        JX_meas=JXz,
        Xoff_meas=offz,
    )


def _probe_states(prior: GaussianBelief):
    n = prior.mean.shape[0]
    L = np.linalg.cholesky(prior.cov + 1e-12 * np.trace(prior.cov) * np.eye(n))
    probes = [prior.mean]
    for j in range(n):
        probes.append(prior.mean + 3.0 * L[:, j])
        probes.append(prior.mean - 3.0 * L[:, j])
    return np.array(probes)


def build_residual(problem: MapProblem, theta) -> np.ndarray:
    """Stacked whitened residual vector at the given parameters."""
    theta = np.asarray(theta, dtype=float)
    mdl = problem.model
    n = mdl.state_dim
    X, Xd = problem.states_at_nodes(theta)
    out = np.empty(problem.n_residuals)

    out[:n] = problem.prior_white @ (X[0] - problem.prior.mean)

    M = problem.meas_times.shape[0]
    m = mdl.meas_dim
    k = n + M * m
    with np.errstate(over="ignore", invalid="ignore"):
        if M:
            Xz = problem.states_at_meas(theta)
            zh = mdl.measurement_batch(Xz, mdl.params)
            out[n:k] = ((problem.meas_values - zh) @ problem.meas_white.T).ravel()
        F = mdl.dynamics_batch(X, mdl.params)
    E = (Xd - F) @ problem.dyn_white.T                      # (K1, r)
    w = problem.sqrt_node_weights[:, None]
    r = problem.partition.noisy_dim
    k2 = k + problem.n_nodes * r
    out[k:k2] = (w * E).ravel()
    if problem.free_rows is not None:
        Ef = (Xd - F) @ problem.free_rows.T                  # (K1, n - r)
        out[k2:] = (problem.penalty_weight * w * Ef).ravel()
    return out


def build_jacobian(problem: MapProblem, theta) -> np.ndarray:
    """Dense Jacobian of `build_residual` at the given parameters."""
    theta = np.asarray(theta, dtype=float)
    mdl = problem.model
    n = mdl.state_dim
    p = problem.n_params
    X, _ = problem.states_at_nodes(theta)
    J = np.empty((problem.n_residuals, p))

    J[:n] = problem.prior_white @ problem.JX_nodes[0]

    M = problem.meas_times.shape[0]
    m = mdl.meas_dim
    k = n + M * m
    with np.errstate(over="ignore", invalid="ignore"):
        if M:
            Xz = problem.states_at_meas(theta)
            H = mdl.measurement_jac_batch(Xz, mdl.params)        # (M, m, n)
            JH = np.einsum("kmn,knp->kmp", H, problem.JX_meas)
            J[n:k] = -np.einsum("qm,kmp->kqp", problem.meas_white, JH).reshape(M * m, p)
        JF = mdl.dynamics_jac_batch(X, mdl.params)               # (K1, n, n)
    D = problem.JXd_nodes - np.einsum("kab,kbp->kap", JF, problem.JX_nodes)
    w = problem.sqrt_node_weights[:, None, None]
    r = problem.partition.noisy_dim
    k2 = k + problem.n_nodes * r
    J[k:k2] = (w * np.einsum("qa,kap->kqp", problem.dyn_white, D)).reshape(-1, p)
    if problem.free_rows is not None:
        J[k2:] = (problem.penalty_weight * w * np.einsum(
            "qa,kap->kqp", problem.free_rows, D)).reshape(-1, p)
    return J


def objective_terms(problem: MapProblem, theta):
    """The three unwhitened quadratic terms (prior, measurement, dynamics).

    Diagnostic helper; their sum equals ||build_residual||^2 for the
    penalty-free strategies.
    """
    mdl = problem.model
    X, Xd = problem.states_at_nodes(theta)
    d0 = X[0] - problem.prior.mean
    prior_term = float(d0 @ np.linalg.solve(problem.prior.cov, d0))
    meas_term = 0.0
    if problem.meas_times.size:
        Xz = problem.states_at_meas(theta)
        dz = problem.meas_values - mdl.measurement_batch(Xz, mdl.params)
        Rinv = np.linalg.inv(mdl.meas_cov)
        meas_term = float(np.einsum("km,mn,kn->", dz, Rinv, dz))
    F = mdl.dynamics_batch(X, mdl.params)
    r = problem.partition.noisy_dim
    E = (Xd - F) @ problem.partition.transform[:r, :].T
    Sinv = np.linalg.inv(problem.partition.noise_cov_noisy)
    wq = problem.time_map.half_span * collocation_grid(problem.order).weights
    dyn_term = float(np.einsum("k,ka,ab,kb->", wq, E, Sinv, E))
    return prior_term, meas_term, dyn_term


@dataclass(frozen=True)
class ChebyshevTrajectory:
    """A solved trajectory: evaluate states and rates anywhere in the window."""

    time_map: AffineTimeMap
    param_map: _ParamMap
    params: np.ndarray

    def eval(self, t):
        """State and time derivative at time(s) t inside the window."""
        scalar = np.isscalar(t) or np.asarray(t).ndim == 0
        taus = self.time_map.forward(np.atleast_1d(np.asarray(t, dtype=float)))
        V, D, G = basis_matrices(self.param_map.order, taus)
        JX, JXd, off, doff = self.param_map.point_matrices(V, D, G)
        X = JX @ self.params + off
        Xd = JXd @ self.params + doff
        if scalar:
            return X[0], Xd[0]
        return X, Xd

    def states(self, t) -> np.ndarray:
        return self.eval(t)[0]

    @property
    def order(self) -> int:
        return self.param_map.order

    def series_coefficients(self) -> np.ndarray:
        return self.param_map.series_coefficients(self.params)

    def state_coefficients(self) -> np.ndarray:
        """Chebyshev coefficients of the state trajectory itself.

        The integrated parameterization raises the degree by one, so the
        returned matrix has order + 2 rows in that case.
        """
        extra = 1 if self.param_map.kind == "integrated" else 0
        order = self.param_map.order + extra
        nodes = collocation_grid(order).nodes
        X = self.states(self.time_map.inverse(nodes))
        return nodal_to_coeffs(X)


def trajectory_eval(trajectory: ChebyshevTrajectory, t):
    """State and rate of a solved trajectory at time(s) t."""
    return trajectory.eval(t)


def initial_params(problem: MapProblem, init="prior", path_times=None, path_states=None):
    """Starting parameters: 'prior' (constant) or 'fit' to a given path."""
    if isinstance(init, np.ndarray):
        if init.shape != (problem.n_params,):
            raise ValueError("explicit start vector has the wrong size")
        return init.astype(float)
    if init == "prior":
        return problem.param_map.constant_params(problem.prior.mean)
    if init == "fit":
        if path_times is None or path_states is None:
            raise ValueError("init='fit' needs path_times and path_states")
        node_t = problem.time_map.inverse(collocation_grid(problem.order).nodes)
        path_states = np.asarray(path_states, dtype=float)
        nodal = np.column_stack([
            np.interp(node_t, np.asarray(path_times, dtype=float), path_states[:, i])
            for i in range(problem.model.state_dim)
        ])
        return problem.param_map.fit_params(nodal)
    raise ValueError(f"unknown init {init!r}")


def _merge_stats(total: SolveStats, stats: SolveStats, first: bool):
    total.iterations += stats.iterations
    total.n_residual_evals += stats.n_residual_evals
    total.n_jacobian_evals += stats.n_jacobian_evals
    total.cost_history.extend(stats.cost_history)
    if first:
        total.initial_cost = stats.initial_cost
    total.final_cost = stats.final_cost
    total.final_grad_norm = stats.final_grad_norm
    total.termination = stats.termination


def solve_batch(
    problem: MapProblem,
    init="prior",
    config: SolverConfig | None = None,
    path_times=None,
    path_states=None,
    penalty_rounds: int = 4,
    penalty_growth: float = 10.0,
    whiten_rounds: int = 1,
    whiten_growth: float = 10.0,
):
    """Solve the MAP problem; returns (ChebyshevTrajectory, SolveStats).

    With the constraint strategy the solve is repeated ``penalty_rounds``
    times with the penalty weight multiplied by ``penalty_growth`` after
    each round, warm-starting from the previous solution.

    ``whiten_rounds > 1`` (other strategies) runs a homotopy on the
    dynamics whitening: early rounds shrink the defect rows by powers of
    ``whiten_growth`` and warm-start the next, which tames stiff
    small-noise problems where a cold start crawls.  The last round uses
    the exact weights, so the minimizer is not altered.
    """
    theta = initial_params(problem, init, path_times, path_states)
    cfg = config or SolverConfig()
    if whiten_rounds < 1:
        raise ValueError("whiten_rounds must be >= 1")

    def one_solve(th0):
        return levenberg_marquardt(
            lambda th: build_residual(problem, th),
            lambda th: build_jacobian(problem, th),
            th0,
            cfg,
        )

    if problem.free_rows is None:
        if whiten_rounds == 1:
            theta, stats = one_solve(theta)
        else:
            w_full = problem.dyn_white
            total = SolveStats()
            try:
                for k in range(whiten_rounds):
                    problem.dyn_white = w_full * whiten_growth ** (k - whiten_rounds + 1)
                    theta, stats = one_solve(theta)
                    _merge_stats(total, stats, first=(k == 0))
            finally:
                problem.dyn_white = w_full
            stats = total
    else:
        base = problem.penalty_weight
        total = SolveStats()
        try:
            for round_idx in range(penalty_rounds):
                problem.penalty_weight = base * penalty_growth**round_idx
                theta, stats = one_solve(theta)
                _merge_stats(total, stats, first=(round_idx == 0))
        finally:
            problem.penalty_weight = base
        stats = total

    traj = ChebyshevTrajectory(problem.time_map, problem.param_map, theta.copy())
    return traj, stats
