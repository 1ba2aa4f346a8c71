"""Chebyshev polynomial primitives on [-1, 1].

First-kind basis values, first derivatives and running integrals from
the three-term recurrences, Chebyshev-Lobatto collocation nodes,
Clenshaw-Curtis quadrature weights, series evaluation, and the dense
coefficient/nodal transform pair.  Everything is exact linear algebra
on small dense matrices; no FFT is used so the transforms stay valid
for arbitrary (including tiny) orders and are trivially differentiable
with respect to the nodal values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Points this far outside [-1, 1] are treated as rounding noise and
# clamped; anything further out is a caller error.
TAU_TOL = 1e-12


class DomainError(ValueError):
    """Evaluation point lies outside the valid interval."""


def _clamp_tau(tau):
    t = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("non-finite evaluation point")
    if np.any(t < -1.0 - TAU_TOL) or np.any(t > 1.0 + TAU_TOL):
        raise DomainError(
            f"evaluation point outside [-1-{TAU_TOL:g}, 1+{TAU_TOL:g}]"
        )
    return np.clip(t, -1.0, 1.0)


def basis_matrices(order: int, taus) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Basis values, derivatives and integrals at many points.

    Parameters
    ----------
    order : int
        Highest polynomial degree N (>= 0).
    taus : array_like
        Points in [-1, 1] (a tolerance of ``TAU_TOL`` outside is clamped).

    Returns
    -------
    V, D, G : ndarray, each of shape (len(taus), order + 1)
        ``V[k, i]`` is the degree-i first-kind polynomial at ``taus[k]``,
        ``D[k, i]`` its derivative, and ``G[k, i]`` its integral from -1
        to ``taus[k]``.
    """
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    t = _clamp_tau(np.atleast_1d(taus))
    if t.ndim != 1:
        raise ValueError("taus must be scalar or one-dimensional")
    npts = t.shape[0]

    # One extra degree: the integral of degree i involves degree i + 1.
    F = np.empty((npts, order + 2))
    F[:, 0] = 1.0
    F[:, 1] = t
    for i in range(1, order + 1):
        F[:, i + 1] = 2.0 * t * F[:, i] - F[:, i - 1]

    D = np.empty((npts, order + 1))
    D[:, 0] = 0.0
    if order >= 1:
        D[:, 1] = 1.0
    for i in range(1, order):
        D[:, i + 1] = 2.0 * F[:, i] + 2.0 * t * D[:, i] - D[:, i - 1]

    G = np.empty((npts, order + 1))
    G[:, 0] = t + 1.0
    if order >= 1:
        G[:, 1] = 0.25 * (F[:, 2] - 1.0)
    for i in range(2, order + 1):
        G[:, i] = (
            F[:, i + 1] / (2.0 * (i + 1))
            - F[:, i - 1] / (2.0 * (i - 1))
            - ((-1.0) ** i) / (i * i - 1.0)
        )

    return F[:, : order + 1], D, G


@dataclass(frozen=True)
class BasisEval:
    """Basis values, derivatives and running integrals at one point."""

    order: int
    values: np.ndarray
    derivatives: np.ndarray
    integrals: np.ndarray


def eval_basis(order: int, tau: float) -> BasisEval:
    """Evaluate all basis polynomials of degree 0..order at one point."""
    V, D, G = basis_matrices(order, float(tau))
    return BasisEval(order, V[0].copy(), D[0].copy(), G[0].copy())


def chebyshev_points(order: int) -> np.ndarray:
    """Chebyshev-Lobatto nodes -cos(k pi / N), k = 0..N, increasing.

    The grid is symmetrized so that ``nodes[::-1] == -nodes`` holds
    exactly and the endpoints are exactly -1 and 1.
    """
    if order < 1:
        raise ValueError(f"grid order must be >= 1, got {order}")
    raw = -np.cos(np.arange(order + 1) * (np.pi / order))
    return 0.5 * (raw - raw[::-1])


def clenshaw_curtis_weights(order: int) -> np.ndarray:
    """Clenshaw-Curtis quadrature weights on the Lobatto grid.

    Closed-form cosine sum; the rule integrates polynomials of degree
    <= order exactly over [-1, 1] and the weights sum to 2.
    """
    if order < 1:
        raise ValueError(f"grid order must be >= 1, got {order}")
    n = order
    k = np.arange(n + 1)
    c = np.where((k == 0) | (k == n), 1.0, 2.0)
    j = np.arange(1, n // 2 + 1)
    if j.size:
        b = np.where(2 * j == n, 1.0, 2.0)
        theta = np.outer(k, j) * (2.0 * np.pi / n)
        series = (np.cos(theta) * (b / (4.0 * j**2 - 1.0))).sum(axis=1)
    else:
        series = 0.0
    w = (c / n) * (1.0 - series)
    # enforce the k <-> n-k symmetry exactly
    return 0.5 * (w + w[::-1])


@dataclass(frozen=True)
class CollocationGrid:
    order: int
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def _grid_cached(order: int) -> CollocationGrid:
    nodes = chebyshev_points(order)
    weights = clenshaw_curtis_weights(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return CollocationGrid(order, nodes, weights)


def collocation_grid(order: int) -> CollocationGrid:
    """Lobatto nodes paired with their Clenshaw-Curtis weights."""
    return _grid_cached(int(order))


def series_eval(coeffs, tau):
    """Evaluate a vector-valued Chebyshev series and its derivative.

    Parameters
    ----------
    coeffs : array_like, shape (order + 1, n)
        Stacked coefficient vectors, one column per state component.
    tau : float or array_like
        Evaluation point(s) in [-1, 1].

    Returns
    -------
    value, slope : ndarray
        Shape (n,) for scalar ``tau``, else (len(tau), n).  The slope is
        with respect to ``tau`` (no time scaling applied here).
    """
    C = np.asarray(coeffs, dtype=float)
    if C.ndim != 2:
        raise ValueError("coeffs must be 2-D with one column per component")
    V, D, _ = basis_matrices(C.shape[0] - 1, tau)
    value = V @ C
    slope = D @ C
    if np.isscalar(tau) or np.asarray(tau).ndim == 0:
        return value[0], slope[0]
    return value, slope


@lru_cache(maxsize=None)
def _transform_cached(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order == 0:
        V = np.ones((1, 1))
        W = np.ones((1, 1))
    else:
        nodes = chebyshev_points(order)
        V, _, _ = basis_matrices(order, nodes)
        # Discrete orthogonality of the first-kind basis on the Lobatto
        # grid with trapezoid end corrections gives the exact inverse.
        mu = np.ones(order + 1)
        mu[0] = mu[-1] = 0.5
        h = np.full(order + 1, order / 2.0)
        h[0] = h[-1] = float(order)
        W = (V * mu[:, None]).T / h[:, None]
    V = V.copy()
    V.setflags(write=False)
    W.setflags(write=False)
    return V, W


def transform_matrices(order: int) -> tuple[np.ndarray, np.ndarray]:
    """The (values, inverse) matrix pair linking coefficients and nodal values.

    ``values @ coeffs`` maps coefficients to nodal values on the Lobatto
    grid of the same order; ``inverse`` undoes it.  Both are dense and
    exact inverses of each other up to rounding.
    """
    return _transform_cached(int(order))


def coeffs_to_nodal(coeffs) -> np.ndarray:
    """Map series coefficients (order+1, n) to values on the Lobatto grid."""
    C = np.asarray(coeffs, dtype=float)
    if C.ndim != 2:
        raise ValueError("coeffs must be 2-D")
    V, _ = transform_matrices(C.shape[0] - 1)
    return V @ C


def nodal_to_coeffs(nodal) -> np.ndarray:
    """Map values on the Lobatto grid (order+1, n) to series coefficients."""
    X = np.asarray(nodal, dtype=float)
    if X.ndim != 2:
        raise ValueError("nodal values must be 2-D")
    _, W = transform_matrices(X.shape[0] - 1)
    return W @ X


@dataclass(frozen=True)
class AffineTimeMap:
    """Affine bijection between a time window [t_start, t_end] and [-1, 1]."""

    t_start: float
    t_end: float

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise ValueError("window endpoints must be finite")
        if not self.t_end > self.t_start:
            raise ValueError(
                f"empty window [{self.t_start}, {self.t_end}]"
            )

    @property
    def half_span(self) -> float:
        """Jacobian dt/dtau of the map; multiplies quadrature weights."""
        return 0.5 * (self.t_end - self.t_start)

    def forward(self, t):
        """Time to tau.  Written so the endpoints map exactly to -1 and 1."""
        t = np.asarray(t, dtype=float)
        out = ((t - self.t_start) + (t - self.t_end)) / (self.t_end - self.t_start)
        return float(out) if out.ndim == 0 else out

    def inverse(self, tau):
        """Tau to time."""
        tau = np.asarray(tau, dtype=float)
        out = self.t_start + 0.5 * (tau + 1.0) * (self.t_end - self.t_start)
        return float(out) if out.ndim == 0 else out
