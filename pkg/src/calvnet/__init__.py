"""Neural networks trained to satisfy classical necessary conditions.

Instead of minimizing a cost directly, the estimators here are trained so
that the first-order optimality conditions of the underlying variational
problem (dynamics, costate, Hamiltonian stationarity, transversality) hold as
residuals at sampled times.  The package bundles a small static-graph
autodiff engine with forward derivative channels, MLP building blocks, the
shared residual training loop, three worked problems (Kalman-filter
covariance, minimum-time double integrator, geodesics on implicit surfaces)
and the classical oracles they are judged against.

Submodules import numpy; this file does not, so the command line can cap
BLAS threading (CALVNET_THREADS) before any numerical code loads.  Symbols
are re-exported lazily from their home modules.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # autodiff
    "HyperDual": "autodiff",
    "Tape": "autodiff",
    "Var": "autodiff",
    "DimensionMismatch": "autodiff",
    "NonFiniteValue": "autodiff",
    "UsageError": "autodiff",
    "eval_with_input_derivs": "autodiff",
    "finite_difference_check": "autodiff",
    # networks
    "MlpSpec": "networks",
    "ParameterStore": "networks",
    "LearnableScalar": "networks",
    "CheckpointError": "networks",
    "glorot_init": "networks",
    "add_mlp": "networks",
    "mlp_forward": "networks",
    "mlp_value": "networks",
    "save_checkpoint": "networks",
    "load_checkpoint": "networks",
    # training
    "TrainConfig": "training",
    "TrainResult": "training",
    "ResidualReport": "training",
    "TrainingAborted": "training",
    "train": "training",
    "alternating_train": "training",
    "pretrain_costate": "training",
    "fit_network": "training",
    # kalman
    "KalmanSystem": "kalman",
    "KalmanProblem": "kalman",
    "BaselineKalmanProblem": "kalman",
    "default_system": "kalman",
    "kalman_replay_report": "kalman",
    "evaluate_kalman": "kalman",
    # mintime
    "MinTimeProblem": "mintime",
    "train_mintime": "mintime",
    "control_argmin": "mintime",
    "estimate_switch_time": "mintime",
    "mintime_replay_report": "mintime",
    "evaluate_mintime": "mintime",
    # geodesic
    "ManifoldSpec": "geodesic",
    "GeodesicProblem": "geodesic",
    "sphere_instance": "geodesic",
    "hypar_instance": "geodesic",
    "energy": "geodesic",
    "arc_length": "geodesic",
    "surface_project": "geodesic",
    "train_geodesic": "geodesic",
    "geodesic_replay_report": "geodesic",
    "evaluate_geodesic": "geodesic",
    # oracles
    "OdeProblem": "oracles",
    "rk4_integrate": "oracles",
    "riccati_solve": "oracles",
    "kalman_costate_solve": "oracles",
    "rollout_kalman": "oracles",
    "bangbang_analytic": "oracles",
    "rollout_mintime": "oracles",
    "polyline_geodesic_oracle": "oracles",
    # config / cli
    "RunConfig": "config",
    "ConfigError": "config",
    "parse_config": "config",
    "serialize_config": "config",
    "MetricsReport": "cli",
    "export_trajectory": "cli",
    "main": "cli",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
