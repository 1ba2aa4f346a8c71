"""Kernel twins (compiled vs interpreted) and cross-implementation checks."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chebmap import kernels
from chebmap.accel import NUMBA_ENABLED, jit_callback
from chebmap.models import van_der_pol_model

needs_numba = pytest.mark.skipif(not NUMBA_ENABLED, reason="compiled path disabled")


@jit_callback
def _blowup_f(x, par):
    return x * x


def _vdp_setup():
    m = van_der_pol_model()
    x0 = np.array([0.5, 0.5])
    P0 = 0.25 * np.eye(2)
    meas_idx = np.arange(100, 1001, 100, dtype=np.int64)
    zs = np.random.default_rng(42).standard_normal((10, 1)) * 0.2 + 1.0
    return m, x0, P0, meas_idx, zs


def test_rk4_path_matches_adaptive_integrator():
    m = van_der_pol_model()
    x0 = np.array([0.5, 0.5])
    path = kernels.rk4_path(m.dynamics, m.params, x0, 1e-3, 2000)
    ref = solve_ivp(
        lambda t, x: m.dynamics(x, m.params),
        (0.0, 2.0),
        x0,
        rtol=1e-12,
        atol=1e-12,
        dense_output=True,
    )
    np.testing.assert_allclose(path[-1], ref.sol(2.0), atol=1e-8)
    np.testing.assert_allclose(path[1000], ref.sol(1.0), atol=1e-8)


def test_em_simulate_zero_noise_is_euler():
    m = van_der_pol_model()
    x0 = np.array([1.0, 0.0])
    noise = np.zeros((50, 2))
    path, fail = kernels.em_simulate(m.dynamics, m.params, x0, 0.01, noise)
    assert fail == -1
    x = x0.copy()
    for k in range(50):
        x = x + m.dynamics(x, m.params) * 0.01
    np.testing.assert_allclose(path[-1], x, rtol=1e-13)


def test_em_simulate_zero_drift_is_cumsum():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal((200, 2)) * 0.1

    @jit_callback
    def zero_f(x, par):
        return np.zeros_like(x)

    path, fail = kernels.em_simulate(zero_f, np.zeros(1), np.zeros(2), 0.5, noise)
    assert fail == -1
    np.testing.assert_allclose(path[1:], np.cumsum(noise, axis=0), atol=1e-14)


def test_em_simulate_detects_blowup():
    path, fail = kernels.em_simulate(
        _blowup_f, np.zeros(1), np.array([3.0]), 0.1, np.zeros((100, 1))
    )
    assert 0 < fail <= 100
    with pytest.raises(kernels.KernelError) as err:
        kernels.check_status(fail, "em_simulate", 0.1)
    assert err.value.step == fail


def test_chol_flag():
    chol = kernels._PY["chol_flag"]
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    L, ok = chol(A)
    assert ok
    np.testing.assert_allclose(L, np.linalg.cholesky(A), rtol=1e-14)
    _, ok = chol(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert not ok


def test_ekf_and_cov_forward_agree_without_measurements():
    # the covariance recursion along a given path must reproduce the EKF
    # covariance when the path is the EKF mean (no updates involved)
    m, x0, P0, _, _ = _vdp_setup()
    GQG = m.diffusion()
    R = m.meas_cov
    dt = 0.01
    nsteps = 100
    no_meas = np.empty(0, dtype=np.int64)
    no_z = np.empty((0, 1))
    mp, cp, mu, cu, phis, _, st = kernels.ekf_forward(
        m.dynamics, m.dynamics_jac, m.measurement, m.measurement_jac,
        m.params, x0, P0, GQG, R, dt, nsteps, no_meas, no_z,
    )
    assert st == -1
    stage = kernels.rk4_path(m.dynamics, m.params, x0, dt / 2, 2 * nsteps)
    cp2, cu2, phis2, st2 = kernels.cov_forward(
        m.dynamics_jac, m.measurement_jac, m.params, stage, P0, GQG, R, dt, no_meas
    )
    assert st2 == -1
    np.testing.assert_allclose(cp2, cp, atol=1e-8)
    np.testing.assert_allclose(phis2, phis, atol=1e-8)


def test_rts_final_point_is_filter():
    m, x0, P0, meas_idx, zs = _vdp_setup()
    out = kernels.ekf_forward(
        m.dynamics, m.dynamics_jac, m.measurement, m.measurement_jac,
        m.params, x0, P0, m.diffusion(), m.meas_cov, 0.01, 1000, meas_idx, zs,
    )
    mp, cp, mu, cu, phis, _, st = out
    assert st == -1
    sm, sP = kernels.rts_backward(mu, cu, mp, cp, phis, 0, 1000)
    np.testing.assert_allclose(sm[-1], mu[-1], atol=1e-14)
    np.testing.assert_allclose(sP[-1], cu[-1], atol=1e-14)
    # smoothing never inflates the covariance trace
    assert np.trace(sP[500]) <= np.trace(cu[500]) + 1e-12


@needs_numba
def test_compiled_and_interpreted_twins_agree():
    m, x0, P0, meas_idx, zs = _vdp_setup()
    GQG, R = m.diffusion(), m.meas_cov
    args = (
        m.dynamics, m.dynamics_jac, m.measurement, m.measurement_jac,
        m.params, x0, P0, GQG, R, 0.01, 1000, meas_idx, zs,
    )
    a = kernels.ekf_forward_nb(*args)
    b = kernels.ekf_forward_py(*args)
    for xa, xb in zip(a, b):
        np.testing.assert_array_equal(np.asarray(xa), np.asarray(xb))

    ua = kernels.ukf_forward_nb(
        m.dynamics, m.measurement, m.params, x0, P0, GQG, R,
        0.01, 1000, meas_idx, zs, 1e-3, 2.0, 0.0,
    )
    ub = kernels.ukf_forward_py(
        m.dynamics, m.measurement, m.params, x0, P0, GQG, R,
        0.01, 1000, meas_idx, zs, 1e-3, 2.0, 0.0,
    )
    for xa, xb in zip(ua, ub):
        np.testing.assert_allclose(np.asarray(xa), np.asarray(xb), atol=1e-12)

    mp, cp, mu, cu, phis, _, _ = a
    sa = kernels.rts_backward_nb(mu, cu, mp, cp, phis, 0, 1000)
    sb = kernels.rts_backward_py(mu, cu, mp, cp, phis, 0, 1000)
    np.testing.assert_allclose(sa[0], sb[0], atol=1e-12)
    np.testing.assert_allclose(sa[1], sb[1], atol=1e-12)

    stage = kernels.rk4_path(m.dynamics, m.params, x0, 0.005, 2000)
    ca = kernels.cov_forward_nb(
        m.dynamics_jac, m.measurement_jac, m.params, stage, P0, GQG, R, 0.01, meas_idx
    )
    cb = kernels.cov_forward_py(
        m.dynamics_jac, m.measurement_jac, m.params, stage, P0, GQG, R, 0.01, meas_idx
    )
    for xa, xb in zip(ca[:3], cb[:3]):
        np.testing.assert_allclose(np.asarray(xa), np.asarray(xb), atol=1e-13)

    noise = np.random.default_rng(3).standard_normal((5000, 2)) * 0.02
    pa, fa = kernels.em_simulate_nb(m.dynamics, m.params, x0, 5e-4, noise)
    pb, fb = kernels.em_simulate_py(m.dynamics, m.params, x0, 5e-4, noise)
    assert fa == fb == -1
    np.testing.assert_array_equal(pa, pb)


def test_ekf_rejects_indefinite_input():
    m, x0, _, meas_idx, zs = _vdp_setup()
    bad_P0 = np.array([[1.0, 0.0], [0.0, -1.0]])
    out = kernels.ekf_forward(
        m.dynamics, m.dynamics_jac, m.measurement, m.measurement_jac,
        m.params, x0, bad_P0, m.diffusion(), m.meas_cov, 0.01, 1000, meas_idx, zs,
    )
    assert out[-1] >= 0
