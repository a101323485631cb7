"""Command-line front end: train, oracle, eval and check subcommands.

Orchestrates the four reference experiments end to end: parse a run config,
train the residual networks, compare headline numbers against the
corresponding oracle, and leave plot-ready artifacts in the output directory:

    config.txt        fully-resolved config echo (re-parseable)
    training_log.txt  epoch, loss, alpha and residual norms
    trajectory.csv    learned trajectories on a uniform grid
    oracle.csv        reference trajectories (Riccati / bang-bang / geodesic)
    checkpoint.bin    trained parameters plus problem metadata
    metrics.json      headline metric, oracle value, relative error, residuals

Exit codes: 0 all configured thresholds met, 1 a threshold missed, 2 training
aborted or an artifact could not be written, 3 bad config or arguments.

Everything numerical is imported lazily so that CALVNET_THREADS can cap BLAS
threading before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

TRAJECTORY_POINTS = 501
EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_ABORT = 2
EXIT_CONFIG = 3


class IoError(OSError):
    """An artifact could not be written (unwritable path, full disk)."""


###############################################################################
# Small shared helpers
###############################################################################


def _apply_thread_cap() -> None:
    """Honor CALVNET_THREADS by capping the BLAS pools numpy might use.

    Must run before numpy is imported anywhere in the process; the BLAS
    runtimes read these variables once at load time.
    """
    cap = os.environ.get("CALVNET_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = cap


def relative_error(learned: float, oracle: float) -> float:
    return abs(learned - oracle) / max(abs(oracle), 1e-12)


def _jsonable(value):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    import numpy as np

    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    return value


def export_trajectory(rows, header: list, path: str) -> None:
    """Write a CSV with a header row and floats at 17 significant digits.

    17 digits make the decimal text a lossless encoding of float64, so
    re-reading the file reproduces the arrays bit-exactly.  An empty batch of
    rows still produces the header line.
    """
    import numpy as np

    rows = np.asarray(rows, dtype=float)
    if rows.size and rows.shape[1] != len(header):
        raise ValueError(f"{len(header)} column names for rows of width {rows.shape[1]}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_trajectory(path: str):
    """Inverse of :func:`export_trajectory`; returns (header, rows)."""
    import numpy as np

    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.asarray(rows, dtype=float).reshape(len(rows), len(header))


def _matrix_names(label: str, rows: int, cols: int) -> list:
    return [f"{label}_{i + 1}{j + 1}" for i in range(rows) for j in range(cols)]


###############################################################################
# Metrics report
###############################################################################


@dataclass
class MetricsReport:
    """Headline numbers of one experiment, JSON-serializable.

    The relative error always follows |learned - oracle| / max(|oracle|,
    1e-12).  ``failures`` lists the configured thresholds that were missed;
    ``warnings`` lists soft checks that only fail the run under --strict.
    """

    problem: str
    headline_metric: str
    headline_value: float
    oracle_value: float
    residuals: dict
    metrics: dict
    thresholds: dict
    failures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    @property
    def relative_error(self) -> float:
        return relative_error(self.headline_value, self.oracle_value)

    def passed(self, strict: bool = False) -> bool:
        return not self.failures and not (strict and self.warnings)

    def to_dict(self) -> dict:
        return _jsonable({
            "problem": self.problem,
            "headline_metric": self.headline_metric,
            "headline_value": self.headline_value,
            "oracle_value": self.oracle_value,
            "relative_error": self.relative_error,
            "residuals": self.residuals,
            "metrics": self.metrics,
            "thresholds": self.thresholds,
            "threshold_failures": self.failures,
            "warnings": self.warnings,
            "wall_clock_seconds": self.wall_clock_seconds,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def write_metrics(report: MetricsReport, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


###############################################################################
# Problem construction and per-problem plumbing
###############################################################################


def build_problem(cfg):
    """Instantiate the trainable problem named by the config."""
    hidden = cfg.param("hidden", (64, 64, 64, 64, 64))
    n_points = cfg.training.points_per_epoch
    if cfg.problem == "kalman":
        from .kalman import KalmanProblem, default_system

        system = cfg.param("system") or default_system()
        return KalmanProblem(system, n_points=n_points, seed=cfg.seed, hidden=hidden)
    if cfg.problem == "mintime":
        from .mintime import MinTimeProblem

        return MinTimeProblem(
            x_init=cfg.param("x0", (1.0, 0.0)),
            x_goal=cfg.param("x_goal", (0.0, 0.0)),
            horizon=cfg.param("horizon", 3.0),
            n_points=n_points,
            seed=cfg.seed,
            hidden=hidden,
            control_batch=cfg.training.alternating_batch,
        )
    from .geodesic import GeodesicProblem, hypar_instance, sphere_instance

    if cfg.problem == "geodesic-sphere":
        p0 = cfg.param("p0")
        spec = sphere_instance(p0) if p0 is not None else sphere_instance()
    else:
        kwargs = {}
        if cfg.param("p0") is not None:
            kwargs["p0"] = cfg.param("p0")
        if cfg.param("p1") is not None:
            kwargs["p1"] = cfg.param("p1")
        spec = hypar_instance(**kwargs)
    return GeodesicProblem(spec, n_points=n_points, seed=cfg.seed, hidden=hidden)


def run_training(cfg, problem, log_path: str | None = None, echo=print):
    """Train ``problem`` per the config; returns the TrainResult.

    The epoch history (loss, alpha, residual norms, learnable scalars) is
    written to ``log_path`` as plain key=value lines.
    """
    from .geodesic import GeodesicProblem, train_geodesic
    from .mintime import MinTimeProblem, train_mintime
    from .training import train

    stride = max(1, cfg.training.epochs // 200)

    def progress(epoch, loss, alpha):
        if echo is not None and (epoch % (stride * 10) == 0 or epoch == cfg.training.epochs):
            echo(f"  epoch {epoch}/{cfg.training.epochs}  loss {loss:.6f}  alpha {alpha:.3f}")

    if isinstance(problem, MinTimeProblem):
        result = train_mintime(problem, cfg.training, log_every=stride, callback=progress)
    elif isinstance(problem, GeodesicProblem):
        result = train_geodesic(problem, cfg.training, log_every=stride, callback=progress)
    else:
        result = train(problem, cfg.training, log_every=stride, callback=progress)
    if log_path is not None:
        try:
            with open(log_path, "w", encoding="utf-8") as fh:
                for row in result.history_rows():
                    fh.write(" ".join(f"{k}={_format_log(v)}" for k, v in row.items()) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {log_path}: {exc}") from exc
    return result


def _format_log(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def final_residuals(cfg, problem) -> dict:
    """One deterministic residual pass at the configured seed, alpha = 1."""
    import numpy as np

    problem.tape.set_input("alpha", np.asarray(1.0))
    problem.prepare_epoch(np.random.default_rng(cfg.seed), problem.n_points)
    return problem.report().all_entries()


def _geodesic_oracle(cfg, spec):
    """Reference curve and length: closed form on the sphere, else polyline."""
    import numpy as np

    from .geodesic import sphere_reference_length
    from .oracles import polyline_geodesic_oracle

    if cfg.problem == "geodesic-sphere":
        p0 = np.asarray(spec.p0, dtype=float)
        theta0 = np.arccos(np.clip(p0[2], -1.0, 1.0))
        radial = p0[:2] / max(np.linalg.norm(p0[:2]), 1e-300)
        thetas = np.linspace(theta0, np.pi / 2.0, TRAJECTORY_POINTS)
        pts = np.stack([np.sin(thetas) * radial[0],
                        np.sin(thetas) * radial[1],
                        np.cos(thetas)], axis=-1)
        return pts, sphere_reference_length(p0), None
    poly = polyline_geodesic_oracle(
        spec,
        n_segments=cfg.param("oracle_segments", 256),
        n_iters=cfg.param("oracle_iters", 20000),
    )
    return poly.points, poly.length, poly


def evaluate_problem(cfg, problem) -> MetricsReport:
    """Run the problem's evaluation protocol and check configured thresholds."""
    if cfg.problem == "kalman":
        return _evaluate_kalman_cfg(cfg, problem)
    if cfg.problem == "mintime":
        return _evaluate_mintime_cfg(cfg, problem)
    return _evaluate_geodesic_cfg(cfg, problem)


def _evaluate_kalman_cfg(cfg, problem) -> MetricsReport:
    from .kalman import evaluate_kalman

    metrics = evaluate_kalman(problem)
    thr = cfg.thresholds
    failures, warnings = [], []
    _check(failures, "trace_rel_error", metrics["trace_T_rel_error"], thr["trace_rel_error"])
    _check(failures, "gain_rel_error", metrics["steady_gain_rel_error"], thr["gain_rel_error"])
    if metrics["continuation_diverged"]:
        failures.append("continuation diverged before t_continue")
    else:
        _check(failures, "continuation_max_trace", metrics["continuation_max_trace"],
               thr["continuation_max_trace"])
    if metrics["rollout_diverged"]:
        warnings.append("rollout diverged inside the training horizon")
    if metrics["are_residual"] > 1e-6:
        warnings.append(f"oracle ARE residual {metrics['are_residual']:.3g} > 1e-6")
    return MetricsReport(
        problem=cfg.problem,
        headline_metric="tr_sigma_T",
        headline_value=metrics["trace_T_learned"],
        oracle_value=metrics["trace_T_oracle"],
        residuals=final_residuals(cfg, problem),
        metrics=metrics,
        thresholds=dict(thr),
        failures=failures,
        warnings=warnings,
    )


def _evaluate_mintime_cfg(cfg, problem) -> MetricsReport:
    from .mintime import evaluate_mintime
    from .oracles import bangbang_analytic

    solution = bangbang_analytic(problem.x_init)
    metrics = evaluate_mintime(problem, eps=cfg.param("eps", 0.05))
    metrics["t_f_oracle"] = solution.t_f
    metrics["switch_time_oracle"] = solution.t_switch
    thr = cfg.thresholds
    failures, warnings = [], []
    _check(failures, "t_f_abs_error", abs(metrics["t_f"] - solution.t_f),
           thr["t_f_abs_error"])
    if not metrics["rollout_hit"]:
        failures.append(
            f"rollout never reached the goal ball (min distance {metrics['rollout_min_dist']:.3g})"
        )
    if metrics["switch_time"] is None:
        failures.append("learned lam2 has no sign change, switch time undefined")
    else:
        _check(failures, "switch_abs_error",
               abs(metrics["switch_time"] - solution.t_switch), thr["switch_abs_error"])
    _check(failures, "lam1_variance", metrics["lam1_variance"], thr["lam1_variance"])
    _check(failures, "lam2_affine_fit_rel", metrics["lam2_affine_fit_rel"],
           thr["lam2_affine_fit_rel"])
    if metrics["lam2_slope"] is not None and metrics["lam2_slope"] * solution.c1 >= 0:
        warnings.append("lam2 slope has the wrong sign relative to the analytic arc")
    return MetricsReport(
        problem=cfg.problem,
        headline_metric="t_f",
        headline_value=metrics["t_f"],
        oracle_value=solution.t_f,
        residuals=final_residuals(cfg, problem),
        metrics=metrics,
        thresholds=dict(thr),
        failures=failures,
        warnings=warnings,
    )


def _evaluate_geodesic_cfg(cfg, problem) -> MetricsReport:
    from .geodesic import evaluate_geodesic

    _, ref_length, _ = _geodesic_oracle(cfg, problem.spec)
    metrics = evaluate_geodesic(problem, reference_length=ref_length)
    thr = cfg.thresholds
    failures, warnings = [], []
    _check(failures, "length_rel_error", metrics["length_rel_error"], thr["length_rel_error"])
    _check(failures, "max_f", metrics["max_f"], thr["max_f"])
    if "speed_cv" in thr:
        _check(failures, "speed_cv", metrics["speed_cv"], thr["speed_cv"])
    if "transversality_angle_deg" in thr:
        if metrics["transversality_angle_deg"] is None:
            failures.append("transversality angle undefined (degenerate gradient)")
        else:
            _check(failures, "transversality_angle_deg",
                   metrics["transversality_angle_deg"], thr["transversality_angle_deg"])
    if "cauchy_schwarz_slack" in thr:
        _check(failures, "cauchy_schwarz_slack", metrics["length_sq_minus_energy"],
               thr["cauchy_schwarz_slack"])
    if metrics["endpoint_phi"] > 1e-2:
        warnings.append(f"stopping-set value at the endpoint is {metrics['endpoint_phi']:.3g}")
    if metrics.get("endpoint_distance") is not None and metrics["endpoint_distance"] > 0.05:
        warnings.append(f"endpoint misses the target by {metrics['endpoint_distance']:.3g}")
    return MetricsReport(
        problem=cfg.problem,
        headline_metric="curve_length",
        headline_value=metrics["length"],
        oracle_value=ref_length,
        residuals=final_residuals(cfg, problem),
        metrics=metrics,
        thresholds=dict(thr),
        failures=failures,
        warnings=warnings,
    )


def _check(failures: list, name: str, value: float, limit: float) -> None:
    if not value <= limit:
        failures.append(f"{name} = {value:.6g} exceeds {limit:.6g}")


###############################################################################
# Trajectory and oracle CSV schemas
###############################################################################


def learned_trajectory(cfg, problem):
    """Uniform-grid dump of the trained networks; returns (header, rows)."""
    import numpy as np

    if cfg.problem == "kalman":
        system = problem.system
        n, m = system.n, system.m
        ts = np.linspace(0.0, system.T, TRAJECTORY_POINTS)
        sigmas = problem.covariance_at(ts)
        gains = problem.gain_of_sigma(sigmas)
        lams = problem.costate_at(ts)
        header = (["t"] + _matrix_names("sigma", n, n) + _matrix_names("gain", n, m)
                  + _matrix_names("lam", n, n) + ["tr_sigma"])
        rows = np.column_stack([
            ts,
            sigmas.reshape(len(ts), -1),
            gains.reshape(len(ts), -1),
            lams.reshape(len(ts), -1),
            np.trace(sigmas, axis1=-2, axis2=-1),
        ])
        return header, rows
    if cfg.problem == "mintime":
        ts = np.linspace(0.0, problem.final_time(), TRAJECTORY_POINTS)
        xs = problem.state_at(ts)
        lams = problem.costate_at(ts)
        us = problem.control_at(ts)
        header = ["t", "x1", "x2", "lam1", "lam2", "u"]
        return header, np.column_stack([ts, xs, lams, us])
    ts = np.linspace(0.0, 1.0, TRAJECTORY_POINTS)
    gamma, gamma_dot = problem.curve_derivatives(ts, order=1)
    lam = problem.multiplier_at(ts)
    header = ["t", "gamma1", "gamma2", "gamma3", "speed", "f_gamma", "lam"]
    rows = np.column_stack([
        ts,
        gamma,
        np.linalg.norm(gamma_dot, axis=1),
        problem.spec.f(gamma),
        lam,
    ])
    return header, rows


def oracle_trajectory(cfg):
    """Reference-solution dump matching the learned schema where possible."""
    import numpy as np

    if cfg.problem == "kalman":
        from .kalman import default_system
        from .oracles import kalman_costate_solve

        system = cfg.param("system") or default_system()
        n, m = system.n, system.m
        ts, sigmas, lams = kalman_costate_solve(system)
        stride = max(1, len(ts) // (TRAJECTORY_POINTS - 1))
        ts, sigmas, lams = ts[::stride], sigmas[::stride], lams[::stride]
        gains = sigmas @ system.C.T @ np.linalg.inv(system.R)
        header = (["t"] + _matrix_names("sigma", n, n) + _matrix_names("gain", n, m)
                  + _matrix_names("lam", n, n) + ["tr_sigma"])
        rows = np.column_stack([
            ts,
            sigmas.reshape(len(ts), -1),
            gains.reshape(len(ts), -1),
            lams.reshape(len(ts), -1),
            np.trace(sigmas, axis1=-2, axis2=-1),
        ])
        return header, rows
    if cfg.problem == "mintime":
        from .oracles import bangbang_analytic

        solution = bangbang_analytic(cfg.param("x0", (1.0, 0.0)))
        ts = np.linspace(0.0, solution.t_f, TRAJECTORY_POINTS)
        header = ["t", "x1", "x2", "lam1", "lam2", "u"]
        rows = np.column_stack([
            ts, solution.state(ts), solution.costate(ts), solution.control(ts),
        ])
        return header, rows
    from .geodesic import hypar_instance, sphere_instance

    if cfg.problem == "geodesic-sphere":
        p0 = cfg.param("p0")
        spec = sphere_instance(p0) if p0 is not None else sphere_instance()
    else:
        kwargs = {k: cfg.param(k) for k in ("p0", "p1") if cfg.param(k) is not None}
        spec = hypar_instance(**kwargs)
    pts, _, _ = _geodesic_oracle(cfg, spec)
    alphas = np.linspace(0.0, 1.0, len(pts))
    header = ["s", "gamma1", "gamma2", "gamma3", "f_gamma"]
    return header, np.column_stack([alphas, pts, spec.f(pts)])


###############################################################################
# Subcommands
###############################################################################


def _prepare_output_dir(cfg) -> str:
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output dir {out}: {exc}") from exc
    from .config import serialize_config

    try:
        with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(serialize_config(cfg))
    except OSError as exc:
        raise IoError(f"cannot write the config echo in {out}: {exc}") from exc
    return out


def _load_config(args):
    from .config import parse_config

    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg.seed = args.seed
        cfg.training = replace(cfg.training, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        from dataclasses import replace

        cfg.training = replace(cfg.training, epochs=args.epochs)
    if getattr(args, "output_dir", None) is not None:
        cfg.output_dir = args.output_dir
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_output_dir(cfg)
    print(f"[calvnet] training {cfg.problem} (seed {cfg.seed}, "
          f"{cfg.training.epochs} epochs) -> {out}")
    problem = build_problem(cfg)
    started = time.perf_counter()
    run_training(cfg, problem, log_path=os.path.join(out, "training_log.txt"))

    from .networks import save_checkpoint

    save_checkpoint(problem.store, os.path.join(out, "checkpoint.bin"),
                    meta=problem.checkpoint_meta())
    report = evaluate_problem(cfg, problem)
    report.wall_clock_seconds = time.perf_counter() - started
    header, rows = learned_trajectory(cfg, problem)
    export_trajectory(rows, header, os.path.join(out, "trajectory.csv"))
    o_header, o_rows = oracle_trajectory(cfg)
    export_trajectory(o_rows, o_header, os.path.join(out, "oracle.csv"))
    write_metrics(report, os.path.join(out, "metrics.json"))
    return _report_outcome(report, args.strict)


def cmd_oracle(args) -> int:
    cfg = _load_config(args)
    out = _prepare_output_dir(cfg)
    header, rows = oracle_trajectory(cfg)
    export_trajectory(rows, header, os.path.join(out, "oracle.csv"))
    print(f"[calvnet] oracle for {cfg.problem} -> {os.path.join(out, 'oracle.csv')}")
    if cfg.problem == "kalman":
        from .kalman import default_system
        from .oracles import riccati_solve

        system = cfg.param("system") or default_system()
        sol = riccati_solve(system)
        print(f"  tr sigma(T) = {sol.trace_at(system.T):.6f}")
        print(f"  ARE residual = {sol.are_residual:.3g}")
        print(f"  settle time = {sol.settle_time:.3f}")
    elif cfg.problem == "mintime":
        from .oracles import bangbang_analytic

        sol = bangbang_analytic(cfg.param("x0", (1.0, 0.0)))
        print(f"  t_f = {sol.t_f:.6f}")
        print(f"  switch time = {sol.t_switch:.6f}")
        print(f"  first-arc control = {sol.a:+.0f}")
    else:
        import numpy as np

        seg = rows[1:, 1:4] - rows[:-1, 1:4]
        print(f"  reference length = {np.sum(np.linalg.norm(seg, axis=1)):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import ConfigError

    cfg = _load_config(args)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    out = _prepare_output_dir(cfg)
    problem = build_problem(cfg)

    from .networks import load_checkpoint

    store, _ = load_checkpoint(args.checkpoint, expect_meta=problem.checkpoint_meta())
    problem.store.load_values(store.clone_values())
    problem.post_step()
    started = time.perf_counter()
    report = evaluate_problem(cfg, problem)
    report.wall_clock_seconds = time.perf_counter() - started
    header, rows = learned_trajectory(cfg, problem)
    export_trajectory(rows, header, os.path.join(out, "trajectory.csv"))
    if args.dump_oracle:
        o_header, o_rows = oracle_trajectory(cfg)
        export_trajectory(o_rows, o_header, os.path.join(out, "oracle.csv"))
    write_metrics(report, os.path.join(out, "metrics.json"))
    return _report_outcome(report, args.strict)


def _report_outcome(report: MetricsReport, strict: bool) -> int:
    print(f"[calvnet] {report.problem}: {report.headline_metric} = "
          f"{report.headline_value:.6f} (oracle {report.oracle_value:.6f}, "
          f"relative error {report.relative_error:.4%})")
    for line in report.failures:
        print(f"  THRESHOLD MISSED: {line}")
    for line in report.warnings:
        prefix = "STRICT FAILURE" if strict else "warning"
        print(f"  {prefix}: {line}")
    if report.passed(strict):
        print("  all thresholds met")
        return EXIT_OK
    return EXIT_THRESHOLD


###############################################################################
# check: fast invariant suite
###############################################################################


def _check_ad_finite_differences(seed: int):
    import numpy as np

    from .autodiff import Tape, finite_difference_check
    from .networks import MlpSpec, ParameterStore, add_mlp, mlp_forward

    spec = MlpSpec(1, 2, (8, 8), head="linear")
    store = ParameterStore()
    add_mlp(store, "n/", spec, np.random.default_rng(seed))
    store = store.freeze()
    ts = np.random.default_rng(seed + 1).uniform(0.0, 1.0, size=(12, 1))

    def lossfn(values):
        store.load_values(values)
        tape = Tape(order=2)
        t = tape.input("t", (12, 1), seed=True)
        tape.set_input("t", ts)
        y = mlp_forward(tape, store, "n/", spec, t)
        loss = tape.sum_all(tape.square(tape.add(y, tape.deriv(y, 2))))
        tape.forward()
        return float(loss.value), tape.backward(loss)

    err = finite_difference_check(lossfn, store.clone_values(), step=1e-6)
    return err < 1e-4, f"max AD-vs-FD relative error {err:.3g}"


def _check_rk4_order(seed: int):
    import numpy as np

    from .oracles import OdeProblem, rk4_integrate

    errs = []
    for h in (0.1, 0.05, 0.025):
        run = rk4_integrate(OdeProblem(lambda _t, y: y, np.array([1.0]), 0.0, 1.0, h))
        errs.append(abs(float(run.final[0]) - float(np.e)))
    slope = float(np.log(errs[0] / errs[2]) / np.log(4.0))
    return slope >= 3.8, f"convergence slope {slope:.2f}"


def _check_riccati(seed: int):
    from .kalman import default_system
    from .oracles import riccati_solve

    sol = riccati_solve(default_system())
    return sol.are_residual < 1e-6, f"ARE residual {sol.are_residual:.3g}"


def _check_riccati_rollout(seed: int):
    import numpy as np

    from .kalman import default_system
    from .oracles import riccati_solve, rollout_kalman

    system = default_system()
    sol = riccati_solve(system)
    rinv = np.linalg.inv(system.R)
    run, diverged = rollout_kalman(system, lambda s: s @ system.C.T @ rinv)
    n = system.n
    k = min(len(run.ys), len(sol.sigmas))
    gap = float(np.max(np.abs(run.ys[:k].reshape(k, n, n) - sol.sigmas[:k])))
    return (not diverged) and gap < 1e-8, f"max covariance gap {gap:.3g}"


def _check_bangbang_closure(seed: int):
    import numpy as np

    from .mintime import mintime_replay_report
    from .oracles import bangbang_analytic

    sol = bangbang_analytic()
    ts = np.concatenate([np.linspace(0.02, sol.t_switch - 0.05, 40),
                         np.linspace(sol.t_switch + 0.05, sol.t_f - 0.02, 40)])
    total = sum(mintime_replay_report(sol, ts).all_entries().values())
    return total < 1e-12, f"residual total {total:.3g}"


def _check_kalman_closure(seed: int):
    import numpy as np

    from .kalman import default_system, kalman_replay_report
    from .oracles import kalman_costate_solve

    system = default_system()
    ts, sigmas, lams = kalman_costate_solve(system)
    # keep both endpoints: the boundary residuals read the first/last rows
    idx = np.linspace(0, len(ts) - 1, 65).round().astype(int)
    gains = sigmas[idx] @ system.C.T @ np.linalg.inv(system.R)
    report = kalman_replay_report(system, ts[idx], sigmas[idx], lams[idx], gains)
    total = sum(report.all_entries().values())
    return total < 1e-6, f"residual total {total:.3g}"


def _check_argmin(seed: int):
    import numpy as np

    from .mintime import control_argmin

    lam2 = np.linspace(-2.0, 2.0, 401)[:, None]
    u = control_argmin(lam2)
    odd = np.array_equal(u, -control_argmin(-lam2))
    signs = np.all(u[lam2 < -1e-3] == 1.0) and np.all(u[lam2 > 1e-3] == -1.0)
    return bool(odd and signs), "odd with u = -sign(lam2)"


def _check_checkpoint_roundtrip(seed: int):
    import tempfile

    import numpy as np

    from .networks import (CheckpointError, MlpSpec, ParameterStore, add_mlp,
                           load_checkpoint, save_checkpoint)

    store = ParameterStore()
    add_mlp(store, "n/", MlpSpec(2, 3, (4,)), np.random.default_rng(seed))
    store = store.freeze()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.bin")
        save_checkpoint(store, path, meta={"problem": "roundtrip"})
        loaded, meta = load_checkpoint(path, expect_meta={"problem": "roundtrip"})
        exact = np.array_equal(loaded.values, store.values)
        try:
            load_checkpoint(path, expect_meta={"problem": "other"})
            rejected = False
        except CheckpointError:
            rejected = True
    return exact and rejected, "bit-exact values, meta mismatch rejected"


_CHECKS = [
    ("ad-finite-differences", _check_ad_finite_differences),
    ("rk4-order", _check_rk4_order),
    ("riccati-are", _check_riccati),
    ("riccati-rollout", _check_riccati_rollout),
    ("bangbang-closure", _check_bangbang_closure),
    ("kalman-closure", _check_kalman_closure),
    ("control-argmin", _check_argmin),
    ("checkpoint-roundtrip", _check_checkpoint_roundtrip),
]


def cmd_check(args) -> int:
    failures = 0
    for name, fn in _CHECKS:
        started = time.perf_counter()
        try:
            ok, detail = fn(args.seed)
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        took = time.perf_counter() - started
        status = "ok  " if ok else "FAIL"
        print(f"{status} {name:24s} {detail} ({took:.2f}s)")
        failures += 0 if ok else 1
    if failures:
        print(f"[calvnet] {failures} of {len(_CHECKS)} checks failed")
        return EXIT_THRESHOLD
    print(f"[calvnet] all {len(_CHECKS)} checks passed")
    return EXIT_OK


###############################################################################
# Argument parsing and entry point
###############################################################################


class _Parser(argparse.ArgumentParser):
    """Argparse variant whose usage errors map to the config exit code."""

    def error(self, message):
        from .config import ConfigError

        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="calvnet",
        description="Train condition-residual networks and compare them "
                    "against classical oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpointed=False):
        p.add_argument("config", help="run config file (flat key=value text)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output-dir", default=None, help="override the output directory")

    p_train = sub.add_parser("train", help="train, evaluate and export artifacts")
    common(p_train)
    p_train.add_argument("--epochs", type=int, default=None, help="override training.epochs")
    p_train.add_argument("--dump-oracle", action="store_true",
                         help="accepted for symmetry; train always writes oracle.csv")
    p_train.add_argument("--strict", action="store_true",
                         help="treat soft warnings as failures")
    p_train.set_defaults(func=cmd_train)

    p_oracle = sub.add_parser("oracle", help="compute and export the reference solution")
    common(p_oracle)
    p_oracle.add_argument("--dump-oracle", action="store_true",
                          help="accepted for symmetry; oracle always writes the CSV")
    p_oracle.set_defaults(func=cmd_oracle)

    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint against the oracle")
    common(p_eval)
    p_eval.add_argument("checkpoint", help="checkpoint written by train")
    p_eval.add_argument("--dump-oracle", action="store_true",
                        help="also export the oracle trajectory CSV")
    p_eval.add_argument("--strict", action="store_true",
                        help="treat soft warnings as failures")
    p_eval.set_defaults(func=cmd_eval)

    p_check = sub.add_parser("check", help="run the fast invariant suite")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    from .config import ConfigError
    from .networks import CheckpointError
    from .training import TrainingAborted

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"[calvnet] config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"[calvnet] checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"[calvnet] training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"[calvnet] io error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
