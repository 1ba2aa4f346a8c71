"""Flat key-value experiment configuration.

Configs are JSON objects whose keys are dotted paths ("truth.x0",
"cheb_batch.order").  Every key must be known: unknown keys, options
for estimators that are not enabled, and malformed values are all
rejected up front so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, field

import numpy as np

from .models import MODEL_BUILDERS, GaussianBelief, SystemModel


def _as_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return int(v)


def _as_bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _as_str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _as_floats(v):
    if not isinstance(v, list) or not v or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        raise TypeError("expected a list of numbers")
    return np.asarray(v, dtype=float)


def _as_matrix(v):
    """1D list -> diagonal matrix, 2D list -> full matrix."""
    if isinstance(v, list) and v and all(isinstance(r, list) for r in v):
        M = np.asarray(v, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise TypeError("expected a square matrix")
        return M
    return np.diag(_as_floats(v))


_TOP_KEYS = {
    "model": _as_str,
    "horizon": _as_float,
    "runs": _as_int,
    "seed": _as_int,
    "estimators": None,  # handled specially
    "truth.x0": _as_floats,
    "truth.dt": _as_float,
    "meas.period": _as_float,
    "prior.mean": _as_floats,
    "prior.cov": _as_matrix,
}

_REQUIRED = ("model", "horizon", "truth.x0", "meas.period",
             "prior.mean", "prior.cov", "estimators")

# per-estimator option schemas; "pseudo_noise" swaps in an inflated
# spectral density for the estimator while the truth keeps its own
ESTIMATOR_OPTIONS = {
    "cheb_batch": {
        "order": _as_int,
        "strategy": _as_str,
        "init": _as_str,
        "cov_step": _as_float,
        "smooth_covariance": _as_bool,
        "pseudo_noise": _as_floats,
        "whiten_rounds": _as_int,
    },
    "cheb_window": {
        "window": _as_float,
        "order": _as_int,
        "strategy": _as_str,
        "init": _as_str,
        "cov_step": _as_float,
        "smooth_covariance": _as_bool,
        "pseudo_noise": _as_floats,
        "whiten_rounds": _as_int,
    },
    "ekf": {"step": _as_float},
    "ukf": {"step": _as_float, "alpha": _as_float, "beta": _as_float,
            "kappa": _as_float},
    "erts": {"step": _as_float},
    "erts_fixed_lag": {"step": _as_float, "lag": _as_int},
    "crlb": {"step": _as_float, "q_floor": _as_floats, "form": _as_str},
}

# "smoother": per-run covariance recursion along each simulated truth;
# "recursive": one information recursion averaged over the whole ensemble
_CRLB_FORMS = ("smoother", "recursive")

_DEFAULTS = {"runs": 1, "seed": 0, "truth.dt": 5e-4}


@dataclass
class ExperimentPlan:
    model: SystemModel
    model_name: str
    horizon: float
    runs: int
    seed: int
    truth_x0: np.ndarray
    truth_dt: float
    meas_period: float
    prior: GaussianBelief
    estimators: list = field(default_factory=list)  # (name, options) pairs
    raw: dict = field(default_factory=dict)


def parse_config(cfg: dict) -> ExperimentPlan:
    """Validate a flat config dict and build the experiment plan."""
    if not isinstance(cfg, dict):
        raise ValueError("configuration must be a JSON object")

    missing = [k for k in _REQUIRED if k not in cfg]
    if missing:
        raise ValueError(f"missing configuration keys: {', '.join(missing)}")

    est_value = cfg["estimators"]
    if isinstance(est_value, str):
        est_names = [s.strip() for s in est_value.split(",") if s.strip()]
    elif isinstance(est_value, list) and all(isinstance(s, str) for s in est_value):
        est_names = list(est_value)
    else:
        raise ValueError("'estimators' must be a list of names or a comma string")
    unknown_est = [n for n in est_names if n not in ESTIMATOR_OPTIONS]
    if unknown_est:
        raise ValueError(
            f"unknown estimators: {', '.join(unknown_est)}; "
            f"known: {', '.join(sorted(ESTIMATOR_OPTIONS))}"
        )
    if len(set(est_names)) != len(est_names):
        raise ValueError("duplicate estimator names")

    model_name = _as_str(cfg["model"])
    if model_name not in MODEL_BUILDERS:
        raise ValueError(
            f"unknown model {model_name!r}; known: "
            f"{', '.join(sorted(MODEL_BUILDERS))}"
        )
    builder = MODEL_BUILDERS[model_name]
    sig = inspect.signature(builder)

    model_kwargs = {}
    est_opts = {name: {} for name in est_names}
    for key, value in cfg.items():
        if key in _TOP_KEYS:
            continue
        head, _, tail = key.partition(".")
        if head == "model" and tail:
            if tail not in sig.parameters:
                raise ValueError(
                    f"unknown model parameter '{key}' for {model_name!r}"
                )
            model_kwargs[tail] = value
            continue
        if head in ESTIMATOR_OPTIONS and tail:
            if head not in est_opts:
                raise ValueError(
                    f"option '{key}' given but estimator {head!r} is not enabled"
                )
            schema = ESTIMATOR_OPTIONS[head]
            if tail not in schema:
                raise ValueError(f"unknown option '{key}'")
            try:
                est_opts[head][tail] = schema[tail](value)
            except TypeError as exc:
                raise ValueError(f"bad value for '{key}': {exc}") from None
            continue
        raise ValueError(f"unknown configuration key '{key}'")

    form = est_opts.get("crlb", {}).get("form")
    if form is not None and form not in _CRLB_FORMS:
        raise ValueError(
            f"bad value for 'crlb.form': expected one of {', '.join(_CRLB_FORMS)}"
        )

    resolved = dict(_DEFAULTS)
    for key, caster in _TOP_KEYS.items():
        if key in cfg and caster is not None:
            try:
                resolved[key] = caster(cfg[key])
            except TypeError as exc:
                raise ValueError(f"bad value for '{key}': {exc}") from None

    model = builder(**model_kwargs)
    x0 = resolved["truth.x0"]
    if x0.shape[0] != model.state_dim:
        raise ValueError("truth.x0 length does not match the model state")
    mean = resolved["prior.mean"]
    cov = resolved["prior.cov"]
    prior = GaussianBelief(mean, cov, 0.0)
    if mean.shape[0] != model.state_dim:
        raise ValueError("prior.mean length does not match the model state")

    horizon = resolved["horizon"]
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    runs = resolved["runs"]
    if runs < 1:
        raise ValueError("runs must be >= 1")

    return ExperimentPlan(
        model=model,
        model_name=model_name,
        horizon=horizon,
        runs=runs,
        seed=resolved["seed"],
        truth_x0=x0,
        truth_dt=resolved["truth.dt"],
        meas_period=resolved["meas.period"],
        prior=prior,
        estimators=[(name, est_opts[name]) for name in est_names],
        raw=dict(cfg),
    )


def load_config(path) -> dict:
    with open(path, "r") as fh:
        return json.load(fh)


def load_plan(path) -> ExperimentPlan:
    return parse_config(load_config(path))
