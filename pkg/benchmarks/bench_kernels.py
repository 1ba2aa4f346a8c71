"""Timing comparison of the compiled kernels against the numpy fallback.

Each case exercises one hot path through realistic workloads on the
stiff oscillator model.  Run directly to time the backend selected by
CHEBMAP_PURE_NUMPY; with --compare the script re-executes itself twice
in subprocesses (flag off, flag on) and prints both columns.

    python3 benchmarks/bench_kernels.py --compare
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def build_cases():
    from chebmap import (
        GaussianBelief,
        build_problem,
        ekf_cd,
        erts_smooth,
        generate_measurements,
        propagate_covariance,
        simulate_truth,
        solve_batch,
        ukf_cd,
    )
    from chebmap.models import MODEL_BUILDERS

    model = MODEL_BUILDERS["van_der_pol"]()
    x0 = np.array([0.5, 0.5])
    prior = GaussianBelief(np.array([1.0, 1.0]), 0.25 * np.eye(2), 0.0)
    horizon, dt = 10.0, 5e-4
    rng = np.random.default_rng(0)
    times, path = simulate_truth(model, x0, horizon, dt, rng)
    mt, zs = generate_measurements(times, path, model, 1.0, rng)

    trace = ekf_cd(model, prior, mt, zs, horizon, 0.01)
    problem = build_problem(model, prior, mt, zs, 0.0, horizon, 100)
    trajectory, _ = solve_batch(problem, whiten_rounds=3)

    return [
        ("em_simulate, 20000 steps",
         lambda: simulate_truth(model, x0, horizon, dt,
                                np.random.default_rng(0))),
        ("ekf forward, 1000 steps",
         lambda: ekf_cd(model, prior, mt, zs, horizon, 0.01)),
        ("ukf forward, 1000 steps",
         lambda: ukf_cd(model, prior, mt, zs, horizon, 0.01)),
        ("rts backward, 1000 steps",
         lambda: erts_smooth(trace)),
        ("covariance propagation + smoothing",
         lambda: propagate_covariance(trajectory, prior.cov, model, mt,
                                      0.01, smooth=True)),
        ("batch MAP solve, order 100",
         lambda: solve_batch(problem, whiten_rounds=3)),
    ]


def run_backend(repeats):
    from chebmap.accel import backend_name

    results = {}
    for name, fn in build_cases():
        fn()  # warmup; compiles the jitted kernels on first touch
        best = float("inf")
        for _ in range(repeats):
            tic = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - tic)
        results[name] = best
    return backend_name(), results


def run_subprocess(pure_numpy, repeats):
    env = dict(os.environ)
    if pure_numpy:
        env["CHEBMAP_PURE_NUMPY"] = "1"
    else:
        env.pop("CHEBMAP_PURE_NUMPY", None)
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--json",
         "--repeats", str(repeats)],
        check=True, capture_output=True, text=True, env=env,
    )
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3,
                    help="timed repetitions per case (best is kept)")
    ap.add_argument("--compare", action="store_true",
                    help="time both backends in subprocesses")
    ap.add_argument("--json", action="store_true",
                    help="emit machine-readable results")
    args = ap.parse_args(argv)

    if args.compare:
        fast = run_subprocess(False, args.repeats)
        slow = run_subprocess(True, args.repeats)
        if fast["backend"] == slow["backend"]:
            print("note: numba unavailable, both columns use the fallback")
        w = max(len(k) for k in fast["results"])
        print(f"{'case':<{w}}  {fast['backend']:>12}  {slow['backend']:>12}  "
              f"{'speedup':>8}")
        for name, t_fast in fast["results"].items():
            t_slow = slow["results"][name]
            print(f"{name:<{w}}  {1e3 * t_fast:>9.2f} ms  "
                  f"{1e3 * t_slow:>9.2f} ms  {t_slow / t_fast:>7.1f}x")
        return 0

    backend, results = run_backend(args.repeats)
    if args.json:
        print(json.dumps({"backend": backend, "results": results}))
        return 0
    print(f"backend: {backend}")
    w = max(len(k) for k in results)
    for name, best in results.items():
        print(f"{name:<{w}}  {1e3 * best:>9.2f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
