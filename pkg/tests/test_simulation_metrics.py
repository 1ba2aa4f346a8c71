"""Truth simulation, measurement synthesis, metrics, and config parsing."""

import numpy as np
import pytest

import oracle_lib
from chebmap.config import parse_config
from chebmap.kernels import KernelError
from chebmap.metrics import (
    armse,
    avg_abs_error,
    bound_rmse,
    nees_bounds,
    nees_series,
    rmse_per_run,
)
from chebmap.models import MODEL_BUILDERS
from chebmap.simulate import generate_measurements, simulate_truth


# ---------------------------------------------------------------- simulation


def test_zero_noise_path_is_deterministic_euler():
    # with zero diffusion the sample path must reduce to explicit Euler
    model, A, _ = oracle_lib.rotation_model(q=0.0)
    x0 = np.array([1.0, 0.25])
    dt = 0.01
    times, path = simulate_truth(model, x0, 2.0, dt, np.random.default_rng(0))

    assert times.shape == (201,)
    assert np.isclose(times[-1], 2.0)
    x = x0.copy()
    ref = [x0.copy()]
    for _ in range(200):
        x = x + (A @ x) * dt
        ref.append(x.copy())
    np.testing.assert_allclose(path, np.array(ref), atol=1e-12)

    # and the rng must not influence the result at all
    _, again = simulate_truth(model, x0, 2.0, dt, np.random.default_rng(99))
    np.testing.assert_array_equal(path, again)


def test_path_seed_determinism():
    model, _, _ = oracle_lib.rotation_model(q=0.3)
    x0 = np.array([1.0, 0.0])
    _, p1 = simulate_truth(model, x0, 1.0, 0.01, np.random.default_rng(42))
    _, p2 = simulate_truth(model, x0, 1.0, 0.01, np.random.default_rng(42))
    _, p3 = simulate_truth(model, x0, 1.0, 0.01, np.random.default_rng(43))
    np.testing.assert_array_equal(p1, p2)
    assert np.max(np.abs(p1 - p3)) > 1e-3


def test_path_start_offset():
    model, _, _ = oracle_lib.rotation_model()
    times, _ = simulate_truth(
        model, np.zeros(2), 1.0, 0.25, np.random.default_rng(0), t_start=2.0
    )
    np.testing.assert_allclose(times, [2.0, 2.25, 2.5, 2.75, 3.0])


def test_dt_must_divide_horizon():
    model, _, _ = oracle_lib.rotation_model()
    with pytest.raises(ValueError, match="divide"):
        simulate_truth(model, np.zeros(2), 1.0, 0.3, np.random.default_rng(0))


def test_diverging_path_raises_kernel_error():
    # a coarse step on a stiff oscillator overflows within a few steps;
    # the simulator must report the failure instead of returning inf
    model = MODEL_BUILDERS["van_der_pol"]()
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(KernelError):
            simulate_truth(
                model, np.array([10.0, 10.0]), 50.0, 1.0, np.random.default_rng(0)
            )


def test_measurement_epochs_and_noise_level():
    model, _, H = oracle_lib.rotation_model(q=0.05, r_var=0.04)
    x0 = np.array([1.0, 0.0])
    times, path = simulate_truth(model, x0, 3.0, 0.01, np.random.default_rng(1))
    mt, zs = generate_measurements(times, path, model, 0.5, np.random.default_rng(2))

    np.testing.assert_allclose(mt, [0.5, 1.0, 1.5, 2.0, 2.5, 3.0], atol=1e-12)
    assert zs.shape == (6, 1)
    res = zs - path[[50, 100, 150, 200, 250, 300]] @ H.T
    assert np.all(np.abs(res) < 6 * 0.2)  # 6 sigma
    assert np.max(np.abs(res)) > 1e-4  # noise actually applied


def test_measurement_period_must_align():
    model, _, _ = oracle_lib.rotation_model()
    times, path = simulate_truth(
        model, np.zeros(2), 1.0, 0.01, np.random.default_rng(0)
    )
    with pytest.raises(ValueError, match="period"):
        generate_measurements(times, path, model, 0.013, np.random.default_rng(0))
    short_t, short_p = times[:40], path[:40]
    with pytest.raises(ValueError, match="horizon"):
        generate_measurements(short_t, short_p, model, 1.0, np.random.default_rng(0))


# ------------------------------------------------------------------- metrics


def test_armse_equals_root_mean_of_run_rmse():
    rng = np.random.default_rng(3)
    e = rng.standard_normal((7, 11, 3)) * rng.uniform(0.1, 5.0)
    per_run = rmse_per_run(e)
    assert per_run.shape == (7, 3)
    np.testing.assert_allclose(
        armse(e), np.sqrt(np.mean(per_run**2, axis=0)), rtol=1e-12
    )


def test_avg_abs_error_hand_case():
    e = np.array([[[1.0, -2.0], [3.0, 0.0]]])  # one run, two epochs
    np.testing.assert_allclose(avg_abs_error(e), [2.0, 1.0])
    np.testing.assert_allclose(armse(e), [np.sqrt(5.0), np.sqrt(2.0)])


def test_nees_scalar_hand_case():
    # P = 4 and errors (2, 4): NEES per run is 1 and 4, averaging to 2.5
    e = np.array([[[2.0]], [[4.0]]])
    P = np.full((2, 1, 1, 1), 4.0)
    np.testing.assert_allclose(nees_series(e, P), [2.5])


def test_nees_matches_explicit_inverse():
    rng = np.random.default_rng(4)
    n = 3
    e = rng.standard_normal((5, 4, n))
    M = rng.standard_normal((5, 4, n, n))
    P = M @ np.swapaxes(M, -1, -2) + 2.0 * np.eye(n)
    ref = np.mean(
        [
            [e[r, k] @ np.linalg.inv(P[r, k]) @ e[r, k] for k in range(4)]
            for r in range(5)
        ],
        axis=0,
    )
    np.testing.assert_allclose(nees_series(e, P), ref, rtol=1e-10)


def test_nees_of_gaussian_samples_is_consistent():
    # correctly specified errors must land inside the chi-square band
    rng = np.random.default_rng(5)
    n, runs, epochs = 3, 4000, 2
    M = rng.standard_normal((n, n))
    P = M @ M.T + np.eye(n)
    L = np.linalg.cholesky(P)
    e = rng.standard_normal((runs, epochs, n)) @ L.T
    covs = np.broadcast_to(P, (runs, epochs, n, n))
    lo, hi = nees_bounds(n, runs)
    series = nees_series(e, covs)
    assert np.all(series > lo) and np.all(series < hi)
    # and scaling the covariance down must break consistency upward
    assert np.all(nees_series(e, 0.5 * covs) > hi)


def test_nees_bounds_frozen_values():
    np.testing.assert_allclose(
        nees_bounds(3, 100), (2.539123, 3.498745), atol=1e-6
    )
    np.testing.assert_allclose(
        nees_bounds(2, 50), (1.484439, 2.591224), atol=1e-6
    )
    # more runs tighten the interval around the state dimension
    lo1, hi1 = nees_bounds(3, 10)
    lo2, hi2 = nees_bounds(3, 1000)
    assert lo1 < lo2 < 3.0 < hi2 < hi1


def test_bound_rmse_diagonal_average():
    covs = np.array([np.diag([1.0, 4.0]), np.diag([3.0, 0.0])])
    np.testing.assert_allclose(bound_rmse(covs), [np.sqrt(2.0), np.sqrt(2.0)])
    stacked = np.broadcast_to(covs, (5, 2, 2, 2))
    np.testing.assert_allclose(bound_rmse(stacked), [np.sqrt(2.0), np.sqrt(2.0)])


# -------------------------------------------------------------------- config


def base_cfg(**overrides):
    cfg = {
        "model": "van_der_pol",
        "horizon": 2.0,
        "truth.x0": [0.5, 0.5],
        "meas.period": 1.0,
        "prior.mean": [1.0, 1.0],
        "prior.cov": [0.25, 0.25],
        "estimators": ["ekf"],
    }
    cfg.update(overrides)
    return cfg


def test_minimal_config_defaults():
    plan = parse_config(base_cfg())
    assert plan.runs == 1 and plan.seed == 0
    assert plan.truth_dt == pytest.approx(5e-4)
    assert plan.model_name == "van_der_pol"
    assert plan.estimators == [("ekf", {})]
    np.testing.assert_allclose(plan.prior.cov, np.diag([0.25, 0.25]))


def test_full_matrix_prior_cov():
    plan = parse_config(base_cfg(**{"prior.cov": [[0.3, 0.1], [0.1, 0.2]]}))
    np.testing.assert_allclose(plan.prior.cov, [[0.3, 0.1], [0.1, 0.2]])


def test_estimators_comma_string():
    plan = parse_config(base_cfg(estimators="ekf, erts"))
    assert [n for n, _ in plan.estimators] == ["ekf", "erts"]


def test_estimator_options_routed():
    cfg = base_cfg(estimators=["ekf", "cheb_batch"])
    cfg["ekf.step"] = 0.02
    cfg["cheb_batch.order"] = 60
    plan = parse_config(cfg)
    assert dict(plan.estimators)["ekf"] == {"step": 0.02}
    assert dict(plan.estimators)["cheb_batch"] == {"order": 60}


def test_model_parameters_forwarded():
    plan = parse_config(base_cfg(**{"model.damping": 1.5}))
    assert plan.model.params[0] == pytest.approx(1.5)
    with pytest.raises(ValueError, match="model parameter"):
        parse_config(base_cfg(**{"model.not_a_knob": 1.0}))


@pytest.mark.parametrize(
    "patch, msg",
    [
        ({"mystery": 1}, "unknown configuration key"),
        ({"estimators": ["ekf", "magic"]}, "unknown estimators"),
        ({"estimators": ["ekf", "ekf"]}, "duplicate"),
        ({"erts.step": 0.01}, "not enabled"),
        ({"ekf.order": 4}, "unknown option"),
        ({"runs": 2.5}, "bad value"),
        ({"ekf.step": "fast"}, "bad value"),
        ({"model": "pendulum"}, "unknown model"),
        ({"truth.x0": [1.0]}, "does not match"),
        ({"horizon": -1.0}, "positive"),
        ({"runs": 0}, ">= 1"),
        ({"estimators": 7}, "estimators"),
    ],
)
def test_config_rejections(patch, msg):
    with pytest.raises(ValueError, match=msg):
        parse_config(base_cfg(**patch))


def test_missing_keys_listed():
    with pytest.raises(ValueError, match="horizon"):
        parse_config({"model": "van_der_pol"})
