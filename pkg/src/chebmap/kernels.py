"""Sequential numerical kernels, compiled and interpreted twins.

Every kernel is written once, in a numba-compatible subset of numpy,
inside ``_build_kernels``.  The factory is instantiated twice: once
plain (the ``*_py`` names) and once under ``@njit`` when numba is
active (the ``*_nb`` names).  The unsuffixed names dispatch to the
compiled versions when available, so callers never branch.  Model
callbacks arrive as first-class function arguments together with a
flat parameter array, which keeps the compiled kernels generic across
models without recompilation per closure.

Status convention: kernels return a ``status`` integer, -1 for success
or the step index at which the recursion lost positive definiteness or
produced non-finite values.  Callers raise on non-negative status.
"""

from __future__ import annotations

import numpy as np

from .accel import NUMBA_ENABLED


def _build_kernels(jit):
    @jit
    def chol_flag(A):
        # lower Cholesky with a success flag instead of an exception
        n = A.shape[0]
        L = np.zeros((n, n))
        for i in range(n):
            s = A[i, i]
            for k in range(i):
                s -= L[i, k] * L[i, k]
            if s <= 0.0 or not np.isfinite(s):
                return L, False
            L[i, i] = np.sqrt(s)
            for j in range(i + 1, n):
                t = A[j, i]
                for k in range(i):
                    t -= L[j, k] * L[i, k]
                L[j, i] = t / L[i, i]
        return L, True

    @jit
    def em_simulate(f, par, x0, dt, noise):
        # Euler-Maruyama with pre-generated noise increments (steps, n);
        # returns the path on the full grid and -1, or the failing step
        steps = noise.shape[0]
        n = x0.shape[0]
        out = np.empty((steps + 1, n))
        out[0] = x0
        x = x0.copy()
        for k in range(steps):
            x = x + f(x, par) * dt + noise[k]
            ok = True
            for i in range(n):
                if not np.isfinite(x[i]):
                    ok = False
            if not ok:
                return out, k + 1
            out[k + 1] = x
        return out, -1

    @jit
    def rk4_step(f, par, x, h):
        k1 = f(x, par)
        k2 = f(x + 0.5 * h * k1, par)
        k3 = f(x + 0.5 * h * k2, par)
        k4 = f(x + h * k3, par)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    @jit
    def rk4_path(f, par, x0, dt, nsteps):
        n = x0.shape[0]
        out = np.empty((nsteps + 1, n))
        out[0] = x0
        x = x0.copy()
        for k in range(nsteps):
            x = rk4_step(f, par, x, dt)
            out[k + 1] = x
        return out

    @jit
    def rk4_mean_cov_phi(f, jacf, par, x, P, GQG, h):
        # one joint step of the mean ODE, the covariance (Lyapunov) ODE
        # and the state transition matrix, sharing stage states
        n = x.shape[0]
        eye = np.eye(n)

        k1 = f(x, par)
        F1 = jacf(x, par)
        x2 = x + 0.5 * h * k1
        k2 = f(x2, par)
        F2 = jacf(x2, par)
        x3 = x + 0.5 * h * k2
        k3 = f(x3, par)
        F3 = jacf(x3, par)
        x4 = x + h * k3
        k4 = f(x4, par)
        F4 = jacf(x4, par)

        xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        G1 = F1
        G2 = F2 @ (eye + 0.5 * h * G1)
        G3 = F3 @ (eye + 0.5 * h * G2)
        G4 = F4 @ (eye + h * G3)
        Phi = eye + (h / 6.0) * (G1 + 2.0 * G2 + 2.0 * G3 + G4)

        # accumulated noise integrated with the same stages, from zero;
        # propagating with the discrete pair (Phi, Qd) keeps the stored
        # covariances exactly consistent with phis, which the backward
        # smoother recursion relies on
        Q1 = GQG
        Qa = 0.5 * h * Q1
        Q2 = F2 @ Qa + Qa @ F2.T + GQG
        Qb = 0.5 * h * Q2
        Q3 = F3 @ Qb + Qb @ F3.T + GQG
        Qc = h * Q3
        Q4 = F4 @ Qc + Qc @ F4.T + GQG
        Qd = (h / 6.0) * (Q1 + 2.0 * Q2 + 2.0 * Q3 + Q4)

        Pn = Phi @ P @ Phi.T + Qd
        Pn = 0.5 * (Pn + Pn.T)

        return xn, Pn, Phi

    @jit
    def kalman_update(x, P, z, zhat, H, R):
        # returns (x_upd, P_upd, innovation, ok)
        m = z.shape[0]
        S = H @ P @ H.T + R
        ok = True
        for i in range(m):
            for j in range(m):
                if not np.isfinite(S[i, j]):
                    ok = False
        if not ok:
            return x, P, z - zhat, False
        Ls, pd = chol_flag(0.5 * (S + S.T))
        if not pd:
            return x, P, z - zhat, False
        HP = H @ P
        K = np.linalg.solve(0.5 * (S + S.T), HP).T
        v = z - zhat
        xn = x + K @ v
        Pn = P - K @ HP
        Pn = 0.5 * (Pn + Pn.T)
        Lp, pd = chol_flag(Pn + 1e-300 * np.eye(P.shape[0]))
        if not pd:
            return xn, Pn, v, False
        return xn, Pn, v, True

    @jit
    def ekf_forward(f, jacf, h, jach, par, x0, P0, GQG, R, dt, nsteps, meas_idx, zs):
        # continuous-discrete EKF on a uniform grid; measurements are
        # applied after the propagation reaching their grid index
        n = x0.shape[0]
        nmeas = meas_idx.shape[0]
        means_p = np.empty((nsteps + 1, n))
        covs_p = np.empty((nsteps + 1, n, n))
        means_u = np.empty((nsteps + 1, n))
        covs_u = np.empty((nsteps + 1, n, n))
        phis = np.empty((nsteps, n, n))
        innov = np.empty((nmeas, zs.shape[1]))
        status = -1

        x = x0.copy()
        P = P0.copy()
        means_p[0] = x
        covs_p[0] = P
        j = 0
        while j < nmeas and meas_idx[j] == 0:
            x, P, v, ok = kalman_update(x, P, zs[j], h(x, par), jach(x, par), R)
            innov[j] = v
            if not ok:
                return means_p, covs_p, means_u, covs_u, phis, innov, 0
            j += 1
        means_u[0] = x
        covs_u[0] = P

        for k in range(nsteps):
            x, P, Phi = rk4_mean_cov_phi(f, jacf, par, x, P, GQG, dt)
            means_p[k + 1] = x
            covs_p[k + 1] = P
            phis[k] = Phi
            while j < nmeas and meas_idx[j] == k + 1:
                x, P, v, ok = kalman_update(x, P, zs[j], h(x, par), jach(x, par), R)
                innov[j] = v
                if not ok:
                    return means_p, covs_p, means_u, covs_u, phis, innov, k + 1
                j += 1
            means_u[k + 1] = x
            covs_u[k + 1] = P
        return means_p, covs_p, means_u, covs_u, phis, innov, status

    @jit
    def ukf_forward(f, h, par, x0, P0, GQG, R, dt, nsteps, meas_idx, zs, alpha, beta, kappa):
        # continuous-discrete UKF: sigma points through RK4 flow, process
        # noise added per substep as GQG*dt
        n = x0.shape[0]
        m = zs.shape[1]
        nmeas = meas_idx.shape[0]
        lam = alpha * alpha * (n + kappa) - n
        c = n + lam
        gam = np.sqrt(c)
        ns = 2 * n + 1
        wm = np.full(ns, 0.5 / c)
        wm[0] = lam / c
        wc = wm.copy()
        wc[0] = lam / c + (1.0 - alpha * alpha + beta)

        means_p = np.empty((nsteps + 1, n))
        covs_p = np.empty((nsteps + 1, n, n))
        means_u = np.empty((nsteps + 1, n))
        covs_u = np.empty((nsteps + 1, n, n))
        innov = np.empty((nmeas, m))

        x = x0.copy()
        P = P0.copy()
        means_p[0] = x
        covs_p[0] = P
        means_u[0] = x
        covs_u[0] = P
        j = 0
        while j < nmeas and meas_idx[j] == 0:
            j += 1

        sig = np.empty((ns, n))
        sigp = np.empty((ns, n))
        zsig = np.empty((ns, m))

        for k in range(nsteps):
            L, ok = chol_flag(P)
            if not ok:
                return means_p, covs_p, means_u, covs_u, innov, k
            sig[0] = x
            for i in range(n):
                sig[i + 1] = x + gam * L[:, i]
                sig[n + i + 1] = x - gam * L[:, i]
            for i in range(ns):
                sigp[i] = rk4_step(f, par, sig[i], dt)
            xm = np.zeros(n)
            for i in range(ns):
                xm += wm[i] * sigp[i]
            Pm = GQG * dt
            for i in range(ns):
                d = sigp[i] - xm
                Pm = Pm + wc[i] * (d.reshape(n, 1) * d.reshape(1, n))
            Pm = 0.5 * (Pm + Pm.T)
            x = xm
            P = Pm
            means_p[k + 1] = x
            covs_p[k + 1] = P

            while j < nmeas and meas_idx[j] == k + 1:
                L, ok = chol_flag(P)
                if not ok:
                    return means_p, covs_p, means_u, covs_u, innov, k + 1
                sig[0] = x
                for i in range(n):
                    sig[i + 1] = x + gam * L[:, i]
                    sig[n + i + 1] = x - gam * L[:, i]
                for i in range(ns):
                    zsig[i] = h(sig[i], par)
                zm = np.zeros(m)
                for i in range(ns):
                    zm += wm[i] * zsig[i]
                S = R.copy()
                Pxz = np.zeros((n, m))
                for i in range(ns):
                    dz = zsig[i] - zm
                    dx = sig[i] - x
                    S = S + wc[i] * (dz.reshape(m, 1) * dz.reshape(1, m))
                    Pxz = Pxz + wc[i] * (dx.reshape(n, 1) * dz.reshape(1, m))
                S = 0.5 * (S + S.T)
                Ls, pd = chol_flag(S)
                if not pd:
                    return means_p, covs_p, means_u, covs_u, innov, k + 1
                K = np.linalg.solve(S, Pxz.T).T
                v = zs[j] - zm
                x = x + K @ v
                P = P - K @ S @ K.T
                P = 0.5 * (P + P.T)
                innov[j] = v
                Lp, pd = chol_flag(P)
                if not pd:
                    return means_p, covs_p, means_u, covs_u, innov, k + 1
                j += 1
            means_u[k + 1] = x
            covs_u[k + 1] = P
        return means_p, covs_p, means_u, covs_u, innov, -1

    @jit
    def cov_forward(jacf, jach, par, stage_states, P0, GQG, R, dt, meas_idx):
        # covariance recursion with Jacobians frozen along a given path;
        # stage_states holds the path at all half-step points (2*nsteps+1, n)
        n = P0.shape[0]
        nsteps = (stage_states.shape[0] - 1) // 2
        nmeas = meas_idx.shape[0]
        covs_p = np.empty((nsteps + 1, n, n))
        covs_u = np.empty((nsteps + 1, n, n))
        phis = np.empty((nsteps, n, n))
        eye = np.eye(n)

        P = P0.copy()
        covs_p[0] = P
        j = 0
        while j < nmeas and meas_idx[j] == 0:
            H = jach(stage_states[0], par)
            S = H @ P @ H.T + R
            Ls, pd = chol_flag(0.5 * (S + S.T))
            if not pd:
                return covs_p, covs_u, phis, 0
            HP = H @ P
            K = np.linalg.solve(0.5 * (S + S.T), HP).T
            P = P - K @ HP
            P = 0.5 * (P + P.T)
            j += 1
        covs_u[0] = P

        for k in range(nsteps):
            F1 = jacf(stage_states[2 * k], par)
            F2 = jacf(stage_states[2 * k + 1], par)
            F4 = jacf(stage_states[2 * k + 2], par)

            G1 = F1
            G2 = F2 @ (eye + 0.5 * dt * G1)
            G3 = F2 @ (eye + 0.5 * dt * G2)
            G4 = F4 @ (eye + dt * G3)
            Phi = eye + (dt / 6.0) * (G1 + 2.0 * G2 + 2.0 * G3 + G4)
            phis[k] = Phi

            # same discrete-consistent step as the filter kernel: noise
            # integral from zero, then Phi P Phi' + Qd
            Q1 = GQG
            Qa = 0.5 * dt * Q1
            Q2 = F2 @ Qa + Qa @ F2.T + GQG
            Qb = 0.5 * dt * Q2
            Q3 = F2 @ Qb + Qb @ F2.T + GQG
            Qc = dt * Q3
            Q4 = F4 @ Qc + Qc @ F4.T + GQG
            Qd = (dt / 6.0) * (Q1 + 2.0 * Q2 + 2.0 * Q3 + Q4)

            P = Phi @ P @ Phi.T + Qd
            P = 0.5 * (P + P.T)
            covs_p[k + 1] = P

            while j < nmeas and meas_idx[j] == k + 1:
                H = jach(stage_states[2 * k + 2], par)
                S = H @ P @ H.T + R
                Ls, pd = chol_flag(0.5 * (S + S.T))
                if not pd:
                    return covs_p, covs_u, phis, k + 1
                HP = H @ P
                K = np.linalg.solve(0.5 * (S + S.T), HP).T
                P = P - K @ HP
                P = 0.5 * (P + P.T)
                Lp, pd = chol_flag(P + 1e-300 * eye)
                if not pd:
                    return covs_p, covs_u, phis, k + 1
                j += 1
            covs_u[k + 1] = P
        return covs_p, covs_u, phis, -1

    @jit
    def rts_backward(means_u, covs_u, means_p, covs_p, phis, i0, i1):
        # fixed-interval smoother sweep over grid indices [i0, i1]
        n = means_u.shape[1]
        ns = i1 - i0
        sm = np.empty((ns + 1, n))
        sP = np.empty((ns + 1, n, n))
        sm[ns] = means_u[i1]
        sP[ns] = covs_u[i1]
        for k in range(i1 - 1, i0 - 1, -1):
            idx = k - i0
            # gain C = P_u Phi' (P_p)^-1 via a symmetric solve
            B = phis[k] @ covs_u[k]
            C = np.linalg.solve(covs_p[k + 1], B).T
            sm[idx] = means_u[k] + C @ (sm[idx + 1] - means_p[k + 1])
            Pn = covs_u[k] + C @ (sP[idx + 1] - covs_p[k + 1]) @ C.T
            sP[idx] = 0.5 * (Pn + Pn.T)
        return sm, sP

    return {
        "chol_flag": chol_flag,
        "em_simulate": em_simulate,
        "rk4_step": rk4_step,
        "rk4_path": rk4_path,
        "rk4_mean_cov_phi": rk4_mean_cov_phi,
        "kalman_update": kalman_update,
        "ekf_forward": ekf_forward,
        "ukf_forward": ukf_forward,
        "cov_forward": cov_forward,
        "rts_backward": rts_backward,
    }


_PY = _build_kernels(lambda fn: fn)

em_simulate_py = _PY["em_simulate"]
rk4_step_py = _PY["rk4_step"]
rk4_path_py = _PY["rk4_path"]
ekf_forward_py = _PY["ekf_forward"]
ukf_forward_py = _PY["ukf_forward"]
cov_forward_py = _PY["cov_forward"]
rts_backward_py = _PY["rts_backward"]

if NUMBA_ENABLED:
    from numba import njit

    _NB = _build_kernels(njit(cache=True))
    em_simulate_nb = _NB["em_simulate"]
    rk4_step_nb = _NB["rk4_step"]
    rk4_path_nb = _NB["rk4_path"]
    ekf_forward_nb = _NB["ekf_forward"]
    ukf_forward_nb = _NB["ukf_forward"]
    cov_forward_nb = _NB["cov_forward"]
    rts_backward_nb = _NB["rts_backward"]
    _ACTIVE = _NB
else:
    _ACTIVE = _PY

em_simulate = _ACTIVE["em_simulate"]
rk4_step = _ACTIVE["rk4_step"]
rk4_path = _ACTIVE["rk4_path"]
ekf_forward = _ACTIVE["ekf_forward"]
ukf_forward = _ACTIVE["ukf_forward"]
cov_forward = _ACTIVE["cov_forward"]
rts_backward = _ACTIVE["rts_backward"]


class KernelError(RuntimeError):
    """A sequential kernel aborted (lost definiteness or finiteness)."""

    def __init__(self, kernel, step, dt):
        self.kernel = kernel
        self.step = step
        self.time_offset = step * dt
        super().__init__(
            f"{kernel} aborted at step {step} (t offset {step * dt:.6g})"
        )


def check_status(status, kernel, dt):
    if status >= 0:
        raise KernelError(kernel, int(status), dt)
