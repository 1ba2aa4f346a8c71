"""Continuous-discrete system models and process-noise partitioning.

A model bundles the drift f(x), its Jacobian, the measurement map h(x)
and its Jacobian, together with the noise input matrix, the spectral
density of the white process noise and the measurement covariance.

Each callback comes in two flavours: a scalar version ``f(x, par)``
operating on a single state vector (compiled with numba when enabled,
so the filter and simulation kernels can call it inside nopython
loops), and a batched version ``f_batch(X, par)`` broadcasting over a
leading axis for vectorized residual assembly.  ``par`` is a flat
float64 parameter array so compiled callbacks never close over Python
objects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .accel import jit_callback


def _check_spd(M, name, semi=False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12 * (1.0 + np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    floor = -1e-12 * max(1.0, w.max(initial=0.0)) if semi else 1e-300
    if w.min() < floor:
        kind = "positive semidefinite" if semi else "positive definite"
        raise ValueError(f"{name} must be {kind}")
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class SystemModel:
    """Continuous-time dynamics with discrete measurements.

    dx = f(x) dt + G dw,  E[dw dw'] = Q dt,  z_k = h(x(t_k)) + v_k,
    v_k ~ N(0, R).
    """

    name: str
    state_dim: int
    meas_dim: int
    params: np.ndarray
    dynamics: Callable
    dynamics_jac: Callable
    measurement: Callable
    measurement_jac: Callable
    dynamics_batch: Callable
    dynamics_jac_batch: Callable
    measurement_batch: Callable
    measurement_jac_batch: Callable
    noise_input: np.ndarray         # G, (state_dim, noise_dim)
    spectral_density: np.ndarray    # Q, (noise_dim, noise_dim)
    meas_cov: np.ndarray            # R, (meas_dim, meas_dim)

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        G = np.asarray(self.noise_input, dtype=float)
        if G.ndim != 2 or G.shape[0] != self.state_dim:
            raise ValueError(f"noise_input shape {G.shape} incompatible with state_dim {self.state_dim}")
        object.__setattr__(self, "noise_input", G)
        Q = _check_spd(self.spectral_density, "spectral_density", semi=True)
        if Q.shape[0] != G.shape[1]:
            raise ValueError("spectral_density size must match noise_input columns")
        object.__setattr__(self, "spectral_density", Q)
        R = _check_spd(self.meas_cov, "meas_cov", semi=False)
        if R.shape[0] != self.meas_dim:
            raise ValueError("meas_cov size must match meas_dim")
        object.__setattr__(self, "meas_cov", R)

    @property
    def noise_dim(self) -> int:
        return self.noise_input.shape[1]

    def diffusion(self) -> np.ndarray:
        """G Q G', the process-noise covariance rate on the state."""
        G = self.noise_input
        return G @ self.spectral_density @ G.T


def with_spectral_density(model: SystemModel, Q) -> SystemModel:
    """Copy of the model with a different process-noise spectral density.

    Used to hand an estimator an inflated (pseudo) noise level, or to
    floor a singular density for bound computations, without touching
    the model generating the truth.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    return replace(model, spectral_density=Q)


def with_meas_cov(model: SystemModel, R) -> SystemModel:
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        R = R.reshape(1, 1)
    elif R.ndim == 1:
        R = np.diag(R)
    return replace(model, meas_cov=R)


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of the state at one instant."""

    mean: np.ndarray
    cov: np.ndarray
    time: float

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).ravel()
        P = _check_spd(self.cov, "cov", semi=True)
        if P.shape[0] != m.shape[0]:
            raise ValueError("mean and cov dimensions differ")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", P)


# ---------------------------------------------------------------------------
# process-noise partitioning

def _pivoted_cholesky(S, rel_tol):
    """Diagonal-pivoted Cholesky of a PSD matrix with rank truncation.

    Returns (order, L, rank, ambiguous) with S[order][:, order] = L L'
    restricted to the leading ``rank`` columns of L.  ``ambiguous`` is
    set when the accept/reject decision sat within a factor of ten of
    the threshold.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    A = S.copy()
    L = np.zeros((n, n))
    order = np.arange(n)
    thresh = rel_tol * max(np.trace(S), 0.0)
    thresh = max(thresh, n * np.finfo(float).eps * max(np.abs(S).max(initial=0.0), 1e-300))
    rank = 0
    ambiguous = False
    for k in range(n):
        d = np.diag(A)[k:]
        j = k + int(np.argmax(d))
        pivot = A[j, j]
        if pivot <= thresh:
            if pivot > 0.1 * thresh:
                ambiguous = True
            break
        if pivot < 10.0 * thresh:
            ambiguous = True
        if j != k:
            order[[k, j]] = order[[j, k]]
            A[[k, j], :] = A[[j, k], :]
            A[:, [k, j]] = A[:, [j, k]]
            L[[k, j], :k] = L[[j, k], :k]
        L[k, k] = np.sqrt(A[k, k])
        if k + 1 < n:
            L[k + 1 :, k] = A[k + 1 :, k] / L[k, k]
            A[k + 1 :, k + 1 :] -= np.outer(L[k + 1 :, k], L[k + 1 :, k])
        rank += 1
    return order, L[:, :rank], rank, ambiguous


@dataclass(frozen=True)
class NoisePartition:
    """Split of the state into noise-driven and noise-free directions.

    The change of variables y = T x (T = mixing @ permutation) orders
    the noise-driven components first.  In the new variables the
    process-noise covariance rate is block diagonal with an invertible
    leading r-by-r block and zeros elsewhere.
    """

    noisy_dim: int
    order: np.ndarray          # permutation: y groups x[order]
    mixing: np.ndarray         # unit lower-triangular correction, (n, n)
    transform: np.ndarray      # T, (n, n)
    transform_inv: np.ndarray
    noisy_block: np.ndarray    # lower-triangular (r, r) factor of the noisy covariance rate
    noise_cov_noisy: np.ndarray  # (r, r), equals noisy_block @ noisy_block.T
    ambiguous_rank: bool

    @property
    def full_rank(self) -> bool:
        return self.noisy_dim == self.transform.shape[0]


RANK_REL_TOL = 1e-10


def partition_noise(model: SystemModel, rel_tol: float = RANK_REL_TOL) -> NoisePartition:
    """Partition the state space by the rank of G Q G'.

    A diagonal-pivoted Cholesky factorization finds the noise-driven
    subspace; pivots below ``rel_tol`` times the trace count as zero.
    When G Q G' is already positive definite the partition is trivial
    (identity transform).  The result is deterministic, so calling it
    twice, or on a model built from already-partitioned pieces, gives
    the same split.
    """
    n = model.state_dim
    S = model.diffusion()
    if np.trace(S) <= 0.0:
        raise ValueError("process noise is identically zero; nothing to partition")
    order, C, r, ambiguous = _pivoted_cholesky(S, rel_tol)
    eye = np.eye(n)
    if r == n:
        # already PD: keep the native ordering
        L = np.linalg.cholesky(S)
        return NoisePartition(
            noisy_dim=n,
            order=np.arange(n),
            mixing=eye,
            transform=eye.copy(),
            transform_inv=eye.copy(),
            noisy_block=L,
            noise_cov_noisy=S.copy(),
            ambiguous_rank=ambiguous,
        )
    if r == 0:
        raise ValueError("process noise numerically zero; inflate it before partitioning")
    C1 = C[:r, :]                       # (r, r) lower, invertible
    C2 = C[r:, :]                       # (n-r, r)
    mixing = eye.copy()
    # cancel the correlation of the trailing rows with the leading block
    mixing[r:, :r] = -C2 @ np.linalg.inv(C1)
    perm = eye[order, :]                # y_perm = x[order]
    T = mixing @ perm
    return NoisePartition(
        noisy_dim=r,
        order=order.copy(),
        mixing=mixing,
        transform=T,
        transform_inv=np.linalg.inv(T),
        noisy_block=C1,
        noise_cov_noisy=C1 @ C1.T,
        ambiguous_rank=ambiguous,
    )


def affine_noise_free_rows(model: SystemModel, partition: NoisePartition, probes):
    """Detect whether the noise-free rows of the transformed drift are affine.

    In the variables y = T x the drift is g(y) = T f(T^{-1} y).  If the
    trailing (noise-free) rows satisfy g_2(y) = A y_1 + b exactly for
    every probe state, return (A, b); otherwise return None.  The probe
    states should span the region the estimator will visit.
    """
    r = partition.noisy_dim
    n = model.state_dim
    if r >= n:
        return None
    T, Tinv = partition.transform, partition.transform_inv
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    A = None
    b = None
    scale = 0.0
    for x in probes:
        J = T @ model.dynamics_jac(x, model.params) @ Tinv
        g = T @ model.dynamics(x, model.params)
        scale = max(scale, np.abs(g[r:]).max(initial=0.0), np.abs(J[r:]).max(initial=0.0))
        tol = 1e-9 * (1.0 + scale)
        if np.abs(J[r:, r:]).max(initial=0.0) > tol:
            return None
        if A is None:
            A = J[r:, :r].copy()
            y1 = (T @ x)[:r]
            b = g[r:] - A @ y1
        else:
            if np.abs(J[r:, :r] - A).max(initial=0.0) > tol:
                return None
            y1 = (T @ x)[:r]
            if np.abs(g[r:] - A @ y1 - b).max(initial=0.0) > tol:
                return None
    return A, b


# ---------------------------------------------------------------------------
# built-in models

@jit_callback
def _vdp_f(x, par):
    lam = par[0]
    out = np.empty(2)
    out[0] = x[1]
    out[1] = -lam * (x[0] * x[0] - 1.0) * x[1] - x[0]
    return out


@jit_callback
def _vdp_jac(x, par):
    lam = par[0]
    J = np.empty((2, 2))
    J[0, 0] = 0.0
    J[0, 1] = 1.0
    J[1, 0] = -2.0 * lam * x[0] * x[1] - 1.0
    J[1, 1] = -lam * (x[0] * x[0] - 1.0)
    return J


@jit_callback
def _vdp_h(x, par):
    out = np.empty(1)
    out[0] = x[0]
    return out


@jit_callback
def _vdp_hjac(x, par):
    H = np.zeros((1, 2))
    H[0, 0] = 1.0
    return H


def _vdp_f_batch(X, par):
    lam = par[0]
    x1, x2 = X[..., 0], X[..., 1]
    return np.stack((x2, -lam * (x1**2 - 1.0) * x2 - x1), axis=-1)


def _vdp_jac_batch(X, par):
    lam = par[0]
    x1, x2 = X[..., 0], X[..., 1]
    J = np.zeros(X.shape[:-1] + (2, 2))
    J[..., 0, 1] = 1.0
    J[..., 1, 0] = -2.0 * lam * x1 * x2 - 1.0
    J[..., 1, 1] = -lam * (x1**2 - 1.0)
    return J


def _vdp_h_batch(X, par):
    return X[..., :1].copy()


def _vdp_hjac_batch(X, par):
    H = np.zeros(X.shape[:-1] + (1, 2))
    H[..., 0, 0] = 1.0
    return H


def van_der_pol_model(
    damping: float = 3.0,
    q_diag=(0.0, 1.0),
    meas_var: float = 0.04,
) -> SystemModel:
    """Van der Pol oscillator with noise on the velocity component.

    State (position, velocity); position is measured directly.
    """
    return SystemModel(
        name="van_der_pol",
        state_dim=2,
        meas_dim=1,
        params=np.array([float(damping)]),
        dynamics=_vdp_f,
        dynamics_jac=_vdp_jac,
        measurement=_vdp_h,
        measurement_jac=_vdp_hjac,
        dynamics_batch=_vdp_f_batch,
        dynamics_jac_batch=_vdp_jac_batch,
        measurement_batch=_vdp_h_batch,
        measurement_jac_batch=_vdp_hjac_batch,
        noise_input=np.eye(2),
        spectral_density=np.diag(np.asarray(q_diag, dtype=float)),
        meas_cov=np.array([[float(meas_var)]]),
    )


@jit_callback
def _reentry_f(x, par):
    gamma = par[0]
    out = np.empty(3)
    drag = np.exp(-gamma * x[0]) * x[1] * x[1] * x[2]
    out[0] = -x[1]
    out[1] = -drag
    out[2] = 0.0
    return out


@jit_callback
def _reentry_jac(x, par):
    gamma = par[0]
    e = np.exp(-gamma * x[0])
    J = np.zeros((3, 3))
    J[0, 1] = -1.0
    J[1, 0] = gamma * e * x[1] * x[1] * x[2]
    J[1, 1] = -2.0 * e * x[1] * x[2]
    J[1, 2] = -e * x[1] * x[1]
    return J


@jit_callback
def _reentry_h(x, par):
    height, offset = par[1], par[2]
    out = np.empty(1)
    d = x[0] - height
    out[0] = np.sqrt(d * d + offset * offset)
    return out


@jit_callback
def _reentry_hjac(x, par):
    height, offset = par[1], par[2]
    d = x[0] - height
    rng = np.sqrt(d * d + offset * offset)
    H = np.zeros((1, 3))
    H[0, 0] = d / rng
    return H


def _reentry_f_batch(X, par):
    gamma = par[0]
    x1, x2, x3 = X[..., 0], X[..., 1], X[..., 2]
    drag = np.exp(-gamma * x1) * x2**2 * x3
    return np.stack((-x2, -drag, np.zeros_like(x1)), axis=-1)


def _reentry_jac_batch(X, par):
    gamma = par[0]
    x1, x2, x3 = X[..., 0], X[..., 1], X[..., 2]
    e = np.exp(-gamma * x1)
    J = np.zeros(X.shape[:-1] + (3, 3))
    J[..., 0, 1] = -1.0
    J[..., 1, 0] = gamma * e * x2**2 * x3
    J[..., 1, 1] = -2.0 * e * x2 * x3
    J[..., 1, 2] = -e * x2**2
    return J


def _reentry_h_batch(X, par):
    d = X[..., 0] - par[1]
    return np.sqrt(d**2 + par[2] ** 2)[..., None]


def _reentry_hjac_batch(X, par):
    d = X[..., 0] - par[1]
    rng = np.sqrt(d**2 + par[2] ** 2)
    H = np.zeros(X.shape[:-1] + (1, 3))
    H[..., 0, 0] = d / rng
    return H


def ballistic_reentry_model(
    drag_decay: float = 5e-5,
    radar_height: float = 1e5,
    radar_offset: float = 1e5,
    meas_var: float = 1e4,
    q_diag=(0.0, 0.0, 0.0),
) -> SystemModel:
    """Vertically falling body tracked by a slant-range radar.

    State (altitude, downward speed, ballistic coefficient).  The
    nominal dynamics are noise-free; estimators that need an invertible
    noise block inject a small pseudo density via `with_spectral_density`.
    """
    return SystemModel(
        name="ballistic_reentry",
        state_dim=3,
        meas_dim=1,
        params=np.array([float(drag_decay), float(radar_height), float(radar_offset)]),
        dynamics=_reentry_f,
        dynamics_jac=_reentry_jac,
        measurement=_reentry_h,
        measurement_jac=_reentry_hjac,
        dynamics_batch=_reentry_f_batch,
        dynamics_jac_batch=_reentry_jac_batch,
        measurement_batch=_reentry_h_batch,
        measurement_jac_batch=_reentry_hjac_batch,
        noise_input=np.eye(3),
        spectral_density=np.diag(np.asarray(q_diag, dtype=float)),
        meas_cov=np.array([[float(meas_var)]]),
    )


# ---------------------------------------------------------------------------
# generic linear model (diagnostics and tests)

@jit_callback
def _lin_f(x, par):
    n = x.shape[0]
    A = par[2 : 2 + n * n].reshape(n, n)
    return A @ x


@jit_callback
def _lin_jac(x, par):
    n = x.shape[0]
    return par[2 : 2 + n * n].reshape(n, n).copy()


@jit_callback
def _lin_h(x, par):
    n = x.shape[0]
    m = int(par[1])
    H = par[2 + n * n : 2 + n * n + m * n].reshape(m, n)
    return H @ x


@jit_callback
def _lin_hjac(x, par):
    n = x.shape[0]
    m = int(par[1])
    return par[2 + n * n : 2 + n * n + m * n].reshape(m, n).copy()


def _lin_f_batch(X, par):
    n = X.shape[-1]
    A = par[2 : 2 + n * n].reshape(n, n)
    return X @ A.T


def _lin_jac_batch(X, par):
    n = X.shape[-1]
    A = par[2 : 2 + n * n].reshape(n, n)
    return np.broadcast_to(A, X.shape[:-1] + (n, n)).copy()


def _lin_h_batch(X, par):
    n = X.shape[-1]
    m = int(par[1])
    H = par[2 + n * n : 2 + n * n + m * n].reshape(m, n)
    return X @ H.T


def _lin_hjac_batch(X, par):
    n = X.shape[-1]
    m = int(par[1])
    H = par[2 + n * n : 2 + n * n + m * n].reshape(m, n)
    return np.broadcast_to(H, X.shape[:-1] + (m, n)).copy()


def linear_model(A, H, Q, R, G=None, name="linear") -> SystemModel:
    """Linear time-invariant model dx = A x dt + G dw, z = H x + v.

    Mostly a diagnostic vehicle: closed-form discretizations exist, so
    every estimator in the package can be checked against exact
    Kalman-filter and smoother recursions on this model.
    """
    A = np.asarray(A, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = A.shape[0]
    m = H.shape[0]
    if G is None:
        G = np.eye(n)
    G = np.asarray(G, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        R = R.reshape(1, 1)
    elif R.ndim == 1:
        R = np.diag(R)
    par = np.concatenate([[float(n), float(m)], A.ravel(), H.ravel()])
    return SystemModel(
        name=name,
        state_dim=n,
        meas_dim=m,
        params=par,
        dynamics=_lin_f,
        dynamics_jac=_lin_jac,
        measurement=_lin_h,
        measurement_jac=_lin_hjac,
        dynamics_batch=_lin_f_batch,
        dynamics_jac_batch=_lin_jac_batch,
        measurement_batch=_lin_h_batch,
        measurement_jac_batch=_lin_hjac_batch,
        noise_input=G,
        spectral_density=Q,
        meas_cov=R,
    )


MODEL_BUILDERS = {
    "van_der_pol": van_der_pol_model,
    "ballistic_reentry": ballistic_reentry_model,
}


def register_model(name: str, builder: Callable) -> None:
    """Add a model factory to the registry used by the CLI and harness."""
    MODEL_BUILDERS[name] = builder
