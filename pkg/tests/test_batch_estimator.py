"""Batch MAP estimator: representation, Jacobians, and posterior agreement."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chebmap.batch import (
    build_jacobian,
    build_problem,
    build_residual,
    initial_params,
    objective_terms,
    solve_batch,
    trajectory_eval,
)
from chebmap.cheb import DomainError
from chebmap.lm import SolverConfig
from chebmap.models import GaussianBelief, van_der_pol_model, with_spectral_density

from oracle_lib import (
    double_integrator_model,
    kf_forward,
    measure_linear,
    rotation_model,
    rts_smooth,
    simulate_linear,
    van_loan,
)


def _vdp_fixture(order=40, horizon=2.0, seed=1, strategy="auto"):
    model = van_der_pol_model()
    rng = np.random.default_rng(seed)
    prior = GaussianBelief(np.array([1.0, 0.5]), 0.25 * np.eye(2), 0.0)
    mt = np.arange(0.5, horizon + 1e-9, 0.5)
    mz = np.column_stack([np.cos(2.2 * mt) + 0.1 * rng.standard_normal(mt.size)])
    return build_problem(model, prior, mt, mz, 0.0, horizon, order, strategy=strategy)


def test_residual_layout_and_objective_equivalence():
    prob = _vdp_fixture(order=16)
    theta = initial_params(prob, "prior") + 0.05 * np.random.default_rng(0).standard_normal(prob.n_params)
    r = build_residual(prob, theta)
    assert r.shape == (prob.n_residuals,)
    pt, zt, dt_ = objective_terms(prob, theta)
    assert float(r @ r) == pytest.approx(pt + zt + dt_, rel=1e-12)


def test_objective_equivalence_full_strategy():
    model = van_der_pol_model(q_diag=(0.4, 1.0))
    prior = GaussianBelief(np.array([1.0, 0.5]), 0.25 * np.eye(2), 0.0)
    mt = np.array([0.5, 1.0])
    mz = np.array([[0.9], [0.4]])
    prob = build_problem(model, prior, mt, mz, 0.0, 1.5, 12)
    assert prob.strategy == "full"
    theta = initial_params(prob, "prior") + 0.1
    r = build_residual(prob, theta)
    assert float(r @ r) == pytest.approx(sum(objective_terms(prob, theta)), rel=1e-12)


@pytest.mark.parametrize("strategy", ["auto", "constraint"])
def test_jacobian_matches_finite_differences(strategy):
    prob = _vdp_fixture(order=8, horizon=1.0, strategy=strategy)
    rng = np.random.default_rng(2)
    theta = initial_params(prob, "prior") + 0.1 * rng.standard_normal(prob.n_params)
    J = build_jacobian(prob, theta)
    h = 1e-6
    Jfd = np.empty_like(J)
    for j in range(prob.n_params):
        e = np.zeros(prob.n_params)
        e[j] = h
        Jfd[:, j] = (build_residual(prob, theta + e) - build_residual(prob, theta - e)) / (2 * h)
    np.testing.assert_allclose(J, Jfd, atol=1e-5 * (1 + np.abs(J).max()))


def test_integrated_linear_ramp():
    # double integrator, constant unit velocity: the integrated
    # parameterization must reproduce x1(t) = t exactly
    model, A, H = double_integrator_model()
    prior = GaussianBelief(np.zeros(2), np.eye(2), 0.0)
    prob = build_problem(model, prior, [1.0], [[1.0]], 0.0, 2.0, 5)
    assert prob.strategy == "integrate-out"
    theta = np.zeros(prob.n_params)
    theta[0] = 0.0          # position anchor
    theta[1] = 1.0          # velocity series: constant one
    traj_x, traj_xd = prob.states_at_nodes(theta)
    node_t = prob.time_map.inverse(np.array([-1.0, 0.0, 1.0]))
    from chebmap.batch import ChebyshevTrajectory

    traj = ChebyshevTrajectory(prob.time_map, prob.param_map, theta)
    for t in (0.0, 0.73, 1.0, 2.0):
        x, xd = traj.eval(t)
        assert x[0] == pytest.approx(t, abs=1e-13)
        assert x[1] == pytest.approx(1.0, abs=1e-13)
        assert xd[0] == pytest.approx(1.0, abs=1e-13)


def test_constant_start_parameters():
    # the integrated parameterization pins the noise-free rows to their
    # exact integrals, so "constant at the prior" means constant noisy
    # components; position then ramps consistently from the prior value
    prob = _vdp_fixture(order=10)
    theta = initial_params(prob, "prior")
    from chebmap.batch import ChebyshevTrajectory

    traj = ChebyshevTrajectory(prob.time_map, prob.param_map, theta)
    tt = np.linspace(0, 2, 9)
    X = traj.states(tt)
    np.testing.assert_allclose(X[0], prob.prior.mean, atol=1e-12)
    np.testing.assert_allclose(X[:, 1], prob.prior.mean[1], atol=1e-12)
    np.testing.assert_allclose(
        X[:, 0], prob.prior.mean[0] + prob.prior.mean[1] * tt, atol=1e-12
    )
    # the full parameterization holds everything constant
    prob2 = _vdp_fixture(order=10, strategy="constraint")
    theta2 = initial_params(prob2, "prior")
    traj2 = ChebyshevTrajectory(prob2.time_map, prob2.param_map, theta2)
    np.testing.assert_allclose(
        traj2.states(tt), np.tile(prob2.prior.mean, (9, 1)), atol=1e-12
    )


def test_fit_roundtrip_full_parameterization():
    model = van_der_pol_model(q_diag=(0.4, 1.0))
    prior = GaussianBelief(np.array([1.0, 0.5]), 0.25 * np.eye(2), 0.0)
    prob = build_problem(model, prior, [1.0], [[0.5]], 0.0, 2.0, 9)
    rng = np.random.default_rng(4)
    theta = rng.standard_normal(prob.n_params)
    from chebmap.batch import ChebyshevTrajectory
    from chebmap.cheb import collocation_grid

    traj = ChebyshevTrajectory(prob.time_map, prob.param_map, theta)
    # sampling exactly on the node grid makes the fit an exact interpolation
    node_t = prob.time_map.inverse(collocation_grid(prob.order).nodes)
    theta2 = initial_params(prob, "fit", node_t, traj.states(node_t))
    np.testing.assert_allclose(theta2, theta, atol=1e-10)


def test_map_matches_exact_linear_smoother():
    # continuous-discrete linear-Gaussian: the MAP trajectory at the
    # measurement epochs must match the exact discrete smoother.  The
    # exact MAP path has slope kinks at the epochs whose size scales
    # with the noise level, so the order is chosen to resolve them.
    model, A, H = rotation_model(q=0.01, r_var=0.04)
    rng = np.random.default_rng(8)
    x0 = np.array([1.0, 0.0])
    path = simulate_linear(model, A, x0, 10.0, 1e-3, rng)
    mt, mz = measure_linear(path, 1e-3, H, model.meas_cov, 1.0, rng)
    prior = GaussianBelief(np.array([1.2, -0.2]), 0.25 * np.eye(2), 0.0)

    prob = build_problem(model, prior, mt, mz, 0.0, 10.0, 200)
    assert prob.strategy == "full"
    traj, stats = solve_batch(prob, init="prior")
    assert stats.converged

    Phi, Qd = van_loan(A, model.diffusion(), 1.0)
    mp, cp, mu, cu = kf_forward(Phi, Qd, H, model.meas_cov, prior.mean, prior.cov, mz)
    sm, sc = rts_smooth(Phi, mp, cp, mu, cu)

    est = traj.states(mt)
    assert np.max(np.abs(est - sm)) <= 1e-3


def test_map_matches_exact_smoother_singular_noise():
    # same check on the double integrator, exercising integrate-out
    model, A, H = double_integrator_model(q=0.2, r_var=0.04)
    rng = np.random.default_rng(9)
    path = simulate_linear(model, A, np.array([0.0, 0.5]), 8.0, 1e-3, rng)
    mt, mz = measure_linear(path, 1e-3, H, model.meas_cov, 1.0, rng)
    prior = GaussianBelief(np.array([0.3, 0.2]), np.diag([0.5, 0.5]), 0.0)

    prob = build_problem(model, prior, mt, mz, 0.0, 8.0, 100)
    assert prob.strategy == "integrate-out"
    traj, stats = solve_batch(prob, init="prior")
    assert stats.converged

    Phi, Qd = van_loan(A, model.diffusion(), 1.0)
    mp, cp, mu, cu = kf_forward(Phi, Qd, H, model.meas_cov, prior.mean, prior.cov, mz)
    sm, _ = rts_smooth(Phi, mp, cp, mu, cu)
    est = traj.states(mt)
    assert np.max(np.abs(est - sm)) <= 1e-3


def test_strategies_agree_on_van_der_pol():
    prob1 = _vdp_fixture(order=40, strategy="auto")
    prob2 = _vdp_fixture(order=40, strategy="constraint")
    t1, s1 = solve_batch(prob1, init="prior")
    t2, s2 = solve_batch(prob2, init="prior", penalty_rounds=5)
    assert s1.converged and s2.converged
    tt = np.linspace(0, 2, 41)
    d = np.abs(t1.states(tt) - t2.states(tt))
    assert d.max() <= 1e-3


def test_pseudo_noise_strategy_approaches_integrated():
    prob1 = _vdp_fixture(order=40, strategy="auto")
    t1, _ = solve_batch(prob1, init="prior")
    model3 = with_spectral_density(van_der_pol_model(), [1e-8, 1.0])
    prior = GaussianBelief(np.array([1.0, 0.5]), 0.25 * np.eye(2), 0.0)
    prob3 = build_problem(
        model3, prior, prob1.meas_times, prob1.meas_values, 0.0, 2.0, 40
    )
    assert prob3.strategy == "full"
    t3, s3 = solve_batch(prob3, init="prior")
    assert s3.converged
    tt = np.linspace(0, 2, 41)
    assert np.max(np.abs(t1.states(tt) - t3.states(tt))) <= 1e-2


def test_vanishing_noise_recovers_ode_flow():
    # with tiny process noise the MAP trajectory collapses onto the ODE
    # flow through its own initial value
    model = van_der_pol_model(q_diag=(0.0, 1e-10))
    prior = GaussianBelief(np.array([1.0, 0.5]), 0.25 * np.eye(2), 0.0)
    mt = np.array([0.7, 1.4, 2.0])
    mz = np.array([[0.8], [-0.3], [-1.2]])
    prob = build_problem(model, prior, mt, mz, 0.0, 2.0, 60)
    # the 1e5 whitening of the dynamics rows keeps the gradient norm far
    # from any absolute tolerance; the invariant is the flow agreement
    traj, stats = solve_batch(prob, init="prior")
    x_start, _ = traj.eval(0.0)
    sol = solve_ivp(
        lambda t, x: model.dynamics(x, model.params),
        (0.0, 2.0),
        x_start,
        rtol=1e-12,
        atol=1e-12,
        dense_output=True,
    )
    tt = np.linspace(0, 2, 81)
    assert np.max(np.abs(traj.states(tt) - sol.sol(tt).T)) <= 1e-6


def test_order_refinement_converges():
    solutions = {}
    for order in (20, 40, 80):
        prob = _vdp_fixture(order=order)
        traj, stats = solve_batch(prob, init="prior")
        assert stats.converged
        solutions[order] = traj
    tt = np.linspace(0, 2, 101)
    d1 = np.max(np.abs(solutions[20].states(tt) - solutions[40].states(tt)))
    d2 = np.max(np.abs(solutions[40].states(tt) - solutions[80].states(tt)))
    assert d2 < 0.8 * d1
    assert d2 < 5e-3


def test_trajectory_domain_and_coefficients():
    prob = _vdp_fixture(order=12)
    traj, _ = solve_batch(prob, init="prior")
    with pytest.raises(DomainError):
        trajectory_eval(traj, 2.5)
    with pytest.raises(DomainError):
        trajectory_eval(traj, -0.5)
    C = traj.series_coefficients()
    assert C.shape == (13, 1)  # integrated: velocity series only
    Cx = traj.state_coefficients()
    assert Cx.shape == (14, 2)
    # state coefficients reproduce the trajectory
    from chebmap.cheb import series_eval

    taus = np.linspace(-1, 1, 21)
    vals, _ = series_eval(Cx, taus)
    np.testing.assert_allclose(vals, traj.states(prob.time_map.inverse(taus)), atol=1e-10)


def test_build_problem_validation():
    model = van_der_pol_model()
    prior = GaussianBelief(np.zeros(2), np.eye(2), 0.0)
    with pytest.raises(ValueError):
        build_problem(model, prior, [0.5, 0.4], [[1.0], [1.0]], 0.0, 1.0, 8)
    with pytest.raises(ValueError):
        build_problem(model, prior, [1.5], [[1.0]], 0.0, 1.0, 8)
    with pytest.raises(ValueError):
        build_problem(model, prior, [0.5], [[1.0]], 0.0, 1.0, 8, strategy="full")
    with pytest.raises(ValueError):
        build_problem(model, prior, [0.5], [[1.0]], 0.0, 1.0, 0)
    # non-affine noise-free rows: auto must refuse with guidance
    from chebmap.models import ballistic_reentry_model

    bad = with_spectral_density(ballistic_reentry_model(), [1e-6, 0.0, 0.0])
    prior3 = GaussianBelief(np.array([3e5, 2e4, 1e-3]), np.diag([1e6, 4e6, 1e-4]), 0.0)
    with pytest.raises(ValueError, match="constraint"):
        build_problem(bad, prior3, [0.5], [[2.2e5]], 0.0, 1.0, 8)
