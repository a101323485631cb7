"""Run configuration: a strict flat key-value format with dotted sections.

The grammar is line oriented and dependency free:

    # comment (also after values)
    problem = kalman
    seed = 3
    training.epochs = 20000
    kalman.Q = 1 0 0 1          # matrices are row-major number lists
    geodesic.p0 = [0.84, 0, 0.54]   # brackets and commas are optional

Every key must be known for the configured problem; anything else raises
:class:`ConfigError` naming the offending key.  Matrix dimensions are
inferred (square from the length, rectangular from the state dimension) and
validated by the problem constructors, whose complaints are re-raised as
ConfigError with the key path attached.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np

from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "serialize_config",
           "config_from_pairs", "PROBLEMS"]

PROBLEMS = ("kalman", "mintime", "geodesic-sphere", "geodesic-hypar")

# training.* keys map straight onto TrainConfig fields
_TRAINING_KEYS = {f.name for f in dataclass_fields(TrainConfig)} - {"seed"}

# per-problem parameter keys (the section name differs from the problem name
# only for the two geodesic variants, which share a section)
_PARAM_KEYS = {
    "kalman": {"A", "B", "C", "Q", "R", "sigma0", "T", "hidden"},
    "mintime": {"x0", "x_goal", "horizon", "eps", "hidden"},
    "geodesic-sphere": {"p0", "hidden", "oracle_segments", "oracle_iters"},
    "geodesic-hypar": {"p0", "p1", "hidden", "oracle_segments", "oracle_iters"},
}

_SECTION_OF = {
    "kalman": "kalman",
    "mintime": "mintime",
    "geodesic-sphere": "geodesic",
    "geodesic-hypar": "geodesic",
}

# acceptance thresholds checked by `calvnet train` / `calvnet eval`
_THRESHOLD_DEFAULTS = {
    "kalman": {
        "trace_rel_error": 0.02,
        "gain_rel_error": 0.05,
        "continuation_max_trace": 10.0,
    },
    "mintime": {
        "t_f_abs_error": 0.05,
        "switch_abs_error": 0.1,
        "lam1_variance": 1e-3,
        "lam2_affine_fit_rel": 1e-2,
    },
    "geodesic-sphere": {
        "length_rel_error": 0.02,
        "max_f": 1e-2,
        "speed_cv": 0.05,
        "transversality_angle_deg": 5.0,
    },
    "geodesic-hypar": {
        "length_rel_error": 0.02,
        "max_f": 1e-2,
        "cauchy_schwarz_slack": 1e-9,
    },
}

# training profile per problem (epochs and batch calibrated for a single CPU)
_TRAINING_DEFAULTS = {
    "kalman": {"epochs": 20000, "points_per_epoch": 512},
    "mintime": {"epochs": 40000, "points_per_epoch": 512},
    "geodesic-sphere": {"epochs": 20000, "points_per_epoch": 512,
                        "optimizer": "adam", "learning_rate": 1e-3},
    "geodesic-hypar": {"epochs": 20000, "points_per_epoch": 512,
                       "optimizer": "adam", "learning_rate": 1e-3},
}


class ConfigError(ValueError):
    """A config file problem, carrying the key path in the message."""


@dataclass
class RunConfig:
    problem: str
    seed: int = 0
    output_dir: str = ""
    training: TrainConfig = None
    params: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def param(self, key, default=None):
        return self.params.get(key, default)


def _parse_scalar(text: str):
    """Best-effort typed value: int, float, bool, number list, else string."""
    stripped = text.strip().strip("[]")
    if stripped.lower() in ("true", "false"):
        return stripped.lower() == "true"
    pieces = stripped.replace(",", " ").split()
    if not pieces:
        return ""
    values = []
    for piece in pieces:
        try:
            values.append(int(piece))
        except ValueError:
            try:
                values.append(float(piece))
            except ValueError:
                return text.strip()
    if len(values) == 1:
        return values[0]
    return values


def _read_pairs(path: str) -> list:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            pairs.append((key.strip(), _parse_scalar(value), lineno))
    return pairs


def _as_float_array(key: str, value, length: int | None = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigError(f"{key}: expected a flat number list")
    if length is not None and arr.size != length:
        raise ConfigError(f"{key}: expected {length} numbers, got {arr.size}")
    return arr


def _as_matrix(key: str, value, rows: int | None = None) -> np.ndarray:
    """Row-major list to matrix; square if rows is None, else rows given."""
    arr = _as_float_array(key, value)
    if rows is None:
        side = int(round(np.sqrt(arr.size)))
        if side * side != arr.size:
            raise ConfigError(f"{key}: {arr.size} numbers do not form a square matrix")
        return arr.reshape(side, side)
    if arr.size % rows != 0:
        raise ConfigError(f"{key}: {arr.size} numbers do not split into {rows} rows")
    return arr.reshape(rows, -1)


def _as_int_tuple(key: str, value) -> tuple:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, list) and all(isinstance(v, int) for v in value):
        return tuple(value)
    raise ConfigError(f"{key}: expected an integer list")


def config_from_pairs(pairs, source: str = "<config>") -> RunConfig:
    """Assemble and validate a RunConfig from (key, value) pairs."""
    flat = {}
    for item in pairs:
        key, value = item[0], item[1]
        lineno = item[2] if len(item) > 2 else None
        where = f"{source}:{lineno}: " if lineno else ""
        if key in flat:
            raise ConfigError(f"{where}duplicate key {key!r}")
        flat[key] = value

    problem = flat.pop("problem", None)
    if problem is None:
        raise ConfigError(f"{source}: missing required key 'problem'")
    if problem not in PROBLEMS:
        raise ConfigError(
            f"problem: unknown problem {problem!r} (choose from {', '.join(PROBLEMS)})"
        )

    seed = flat.pop("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
    output_dir = str(flat.pop("output_dir", os.path.join("runs", problem)))

    training_kwargs = dict(_TRAINING_DEFAULTS[problem])
    params = {}
    thresholds = dict(_THRESHOLD_DEFAULTS[problem])
    section = _SECTION_OF[problem]
    for key, value in flat.items():
        head, _, tail = key.partition(".")
        if head == "training" and tail in _TRAINING_KEYS:
            training_kwargs[tail] = value
        elif head == section and tail in _PARAM_KEYS[problem]:
            params[tail] = value
        elif head == "thresholds" and tail in thresholds:
            thresholds[tail] = float(value)
        else:
            raise ConfigError(f"unknown key {key!r} for problem {problem!r}")

    try:
        training = TrainConfig(seed=seed, **training_kwargs)
    except TypeError as exc:
        raise ConfigError(f"training: {exc}") from exc
    _validate_training(training)
    params = _validate_params(problem, params)
    return RunConfig(problem=problem, seed=seed, output_dir=output_dir,
                     training=training, params=params, thresholds=thresholds)


def parse_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return config_from_pairs(_read_pairs(path), source=path)


def _validate_training(cfg: TrainConfig) -> None:
    if cfg.epochs <= 0:
        raise ConfigError("training.epochs: must be positive")
    if cfg.learning_rate <= 0:
        raise ConfigError("training.learning_rate: must be positive")
    if cfg.points_per_epoch <= 0:
        raise ConfigError("training.points_per_epoch: must be positive")
    if not 0.0 < cfg.lr_decay <= 1.0:
        raise ConfigError("training.lr_decay: must be in (0, 1]")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"training.optimizer: unknown optimizer {cfg.optimizer!r}")


def _validate_params(problem: str, params: dict) -> dict:
    """Normalize arrays and run problem-level validation early."""
    out = dict(params)
    if "hidden" in out:
        out["hidden"] = _as_int_tuple(f"{_SECTION_OF[problem]}.hidden", out["hidden"])
    if problem == "kalman":
        out = _validate_kalman(out)
    elif problem == "mintime":
        for key in ("x0", "x_goal"):
            if key in out:
                out[key] = tuple(_as_float_array(f"mintime.{key}", out[key], 2))
        if "horizon" in out and float(out["horizon"]) <= 0:
            raise ConfigError("mintime.horizon: must be positive")
        if "eps" in out and float(out["eps"]) <= 0:
            raise ConfigError("mintime.eps: must be positive")
    else:
        for key in ("p0", "p1"):
            if key in out:
                out[key] = tuple(_as_float_array(f"geodesic.{key}", out[key], 3))
        for key in ("oracle_segments", "oracle_iters"):
            if key in out and (not isinstance(out[key], int) or out[key] <= 0):
                raise ConfigError(f"geodesic.{key}: expected a positive integer")
    return out


def _validate_kalman(params: dict) -> dict:
    from .kalman import KalmanSystem, default_system

    base = default_system()
    out = dict(params)
    a = _as_matrix("kalman.A", out["A"]) if "A" in out else base.A
    n = a.shape[0]
    b = _as_matrix("kalman.B", out["B"], rows=n) if "B" in out else base.B
    c_flat = _as_float_array("kalman.C", out["C"]) if "C" in out else None
    if c_flat is not None and c_flat.size % n != 0:
        raise ConfigError(f"kalman.C: {c_flat.size} numbers do not split into columns of {n}")
    c = c_flat.reshape(-1, n) if c_flat is not None else base.C
    q = _as_matrix("kalman.Q", out["Q"]) if "Q" in out else base.Q
    r = _as_matrix("kalman.R", out["R"]) if "R" in out else base.R
    sigma0 = _as_matrix("kalman.sigma0", out["sigma0"]) if "sigma0" in out else base.sigma0
    T = float(out.get("T", base.T))
    try:
        system = KalmanSystem(A=a, B=b, C=c, Q=q, R=r, sigma0=sigma0, T=T)
    except ValueError as exc:
        raise ConfigError(f"kalman: {exc}") from exc
    out["system"] = system
    for key in ("A", "B", "C", "Q", "R", "sigma0", "T"):
        out.pop(key, None)
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parsing it back gives an equivalent config."""
    lines = [f"problem = {cfg.problem}", f"seed = {cfg.seed}",
             f"output_dir = {cfg.output_dir}"]
    defaults = TrainConfig(seed=cfg.seed, **_TRAINING_DEFAULTS[cfg.problem])
    for f in dataclass_fields(TrainConfig):
        if f.name == "seed":
            continue
        value = getattr(cfg.training, f.name)
        if value != getattr(defaults, f.name):
            lines.append(f"training.{f.name} = {_format_value(value)}")
    section = _SECTION_OF[cfg.problem]
    for key in sorted(cfg.params):
        if key == "system":
            system = cfg.params["system"]
            for name in ("A", "B", "C", "Q", "R", "sigma0"):
                lines.append(f"{section}.{name} = {_format_value(getattr(system, name))}")
            lines.append(f"{section}.T = {_format_value(system.T)}")
        else:
            lines.append(f"{section}.{key} = {_format_value(cfg.params[key])}")
    for key in sorted(cfg.thresholds):
        if cfg.thresholds[key] != _THRESHOLD_DEFAULTS[cfg.problem][key]:
            lines.append(f"thresholds.{key} = {_format_value(cfg.thresholds[key])}")
    return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, np.ndarray):
        return " ".join(f"{v:.17g}" for v in value.ravel())
    if isinstance(value, (tuple, list)):
        return " ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if value is None:
        return ""
    return str(value)
