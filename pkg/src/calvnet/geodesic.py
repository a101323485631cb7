"""Shortest curves on implicit surfaces, trained from geodesic residuals.

A curve net ``gamma(t): [0,1] -> R^3`` and a scalar multiplier net ``lam(t)``
are trained so that

    psi1 = f(gamma)                   (stay on the surface f = 0)
    psi2 = lam * grad f(gamma) - gamma''   (acceleration purely normal)

vanish along the curve, together with the point condition ``gamma(0) = p0``
and one of two terminal systems.  A free boundary adds the stopping-set and
transversality residuals

    phi(gamma(1)) = 0
    psi3 = gamma'(1) - lam_f * grad phi(gamma(1))

while a pinned endpoint uses the point condition ``gamma(1) = p1`` instead
(with ``phi = |x - p1|^2`` the transversality equation is degenerate: its
right side vanishes exactly where the endpoint is correct).

The trained functional is the energy, whose minimisers are constant-speed
geodesics; arc length is evaluation-only.  ``gamma''`` comes straight off
the second-order derivative channel, so this problem runs on an order-2
tape.  Two surfaces are wired up: the unit sphere with the equator as
stopping set, and the hyperbolic paraboloid ``z = x^2 - y^2`` with a fixed
endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, UsageError, Var
from .networks import LearnableScalar, MlpSpec, ParameterStore, add_mlp, mlp_forward, mlp_value
from .training import (ResidualReport, TrainConfig, TrainResult, fit_network,
                       train, weighted_total)

__all__ = [
    "ManifoldSpec",
    "sphere_instance",
    "hypar_instance",
    "energy",
    "arc_length",
    "GeodesicProblem",
    "surface_project",
    "train_geodesic",
    "geodesic_replay_report",
    "evaluate_geodesic",
]

ON_SURFACE_TOL = 1e-9

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class ManifoldSpec:
    """An implicit surface, its stopping set, and the run's endpoints.

    Every function comes in two forms: a plain numpy callable over ``(n, 3)``
    row batches (used by oracles and evaluation) and a tape-expression
    builder ``(tape, x) -> Var`` (used inside the residual graph).  ``p1`` is
    set only for fixed-endpoint runs, in which case ``phi`` is the squared
    distance to it.
    """

    name: str
    f: Callable
    grad_f: Callable
    phi: Callable
    grad_phi: Callable
    f_expr: Callable
    grad_f_expr: Callable
    phi_expr: Callable
    grad_phi_expr: Callable
    p0: tuple
    p1: Optional[tuple] = None

    def __post_init__(self):
        p0 = np.asarray(self.p0, dtype=float)
        if p0.shape != (3,):
            raise UsageError(f"p0 must be a 3-vector, got shape {p0.shape}")
        if abs(float(self.f(p0[None])[0])) > ON_SURFACE_TOL:
            raise UsageError(f"start point {self.p0} is not on {self.name} (f != 0)")
        if self.p1 is not None:
            p1 = np.asarray(self.p1, dtype=float)
            if abs(float(self.f(p1[None])[0])) > ON_SURFACE_TOL:
                raise UsageError(f"endpoint {self.p1} is not on {self.name} (f != 0)")

    def start(self) -> np.ndarray:
        return np.asarray(self.p0, dtype=float)

    def stop_project(self, x: np.ndarray) -> np.ndarray:
        """Project a point near the stopping set onto it (used by oracles)."""
        if self.p1 is not None:
            return np.asarray(self.p1, dtype=float)
        x = np.asarray(x, dtype=float).copy()
        # one-constraint Newton step on phi along its gradient, iterated
        for _ in range(50):
            val = float(self.phi(x[None])[0])
            if abs(val) < 1e-12:
                break
            g = self.grad_phi(x[None])[0]
            x = x - val * g / max(float(g @ g), 1e-30)
        return x


def _row(tape: Tape, p) -> Var:
    return tape.constant(np.asarray(p, dtype=float)[None])


def _sum_rows(tape: Tape, v: Var) -> Var:
    """Sum over the last axis, keeping rows: (n, k) @ ones(k, 1)."""
    ones = tape.constant(np.ones((v.shape[-1], 1)))
    return tape.matmul(v, ones)


def sphere_instance(p0=(np.sin(1.0), 0.0, np.cos(1.0))) -> ManifoldSpec:
    """Unit sphere; stopping set is the equator via phi = (|x|^2 - 1)^2 + z."""

    def f(x):
        return np.sum(x * x, axis=-1) - 1.0

    def grad_f(x):
        return 2.0 * x

    def phi(x):
        return f(x) ** 2 + x[..., 2]

    def grad_phi(x):
        return 4.0 * f(x)[..., None] * x + np.array([0.0, 0.0, 1.0])

    def f_expr(tape, x):
        return tape.shift(_sum_rows(tape, tape.square(x)), -1.0)

    def grad_f_expr(tape, x):
        return tape.scale(x, 2.0)

    def phi_expr(tape, x):
        z = tape.take_cols(x, 2, 3)
        return tape.add(tape.square(f_expr(tape, x)), z)

    def grad_phi_expr(tape, x):
        lifted = tape.mul(tape.scale(f_expr(tape, x), 4.0), x)
        return tape.add(lifted, tape.constant(np.array([[0.0, 0.0, 1.0]])))

    return ManifoldSpec(
        name="sphere",
        f=f, grad_f=grad_f, phi=phi, grad_phi=grad_phi,
        f_expr=f_expr, grad_f_expr=grad_f_expr,
        phi_expr=phi_expr, grad_phi_expr=grad_phi_expr,
        p0=tuple(float(c) for c in p0),
    )


def hypar_instance(p0=(1.0, 1.0, 0.0), p1=(-1.0, 1.0, 0.0)) -> ManifoldSpec:
    """Hyperbolic paraboloid z = x^2 - y^2 with a pinned endpoint."""
    p1_arr = np.asarray(p1, dtype=float)

    def f(x):
        return x[..., 2] - x[..., 0] ** 2 + x[..., 1] ** 2

    def grad_f(x):
        out = np.empty_like(x)
        out[..., 0] = -2.0 * x[..., 0]
        out[..., 1] = 2.0 * x[..., 1]
        out[..., 2] = 1.0
        return out

    def phi(x):
        d = x - p1_arr
        return np.sum(d * d, axis=-1)

    def grad_phi(x):
        return 2.0 * (x - p1_arr)

    def f_expr(tape, x):
        z = tape.take_cols(x, 2, 3)
        x1 = tape.take_cols(x, 0, 1)
        x2 = tape.take_cols(x, 1, 2)
        return tape.add(tape.sub(z, tape.square(x1)), tape.square(x2))

    def grad_f_expr(tape, x):
        x1 = tape.take_cols(x, 0, 1)
        x2 = tape.take_cols(x, 1, 2)
        ones = tape.constant(np.ones((x.shape[0], 1)))
        return tape.concat([tape.scale(x1, -2.0), tape.scale(x2, 2.0), ones])

    def phi_expr(tape, x):
        d = tape.sub(x, _row(tape, p1_arr))
        return _sum_rows(tape, tape.square(d))

    def grad_phi_expr(tape, x):
        return tape.scale(tape.sub(x, _row(tape, p1_arr)), 2.0)

    return ManifoldSpec(
        name="hypar",
        f=f, grad_f=grad_f, phi=phi, grad_phi=grad_phi,
        f_expr=f_expr, grad_f_expr=grad_f_expr,
        phi_expr=phi_expr, grad_phi_expr=grad_phi_expr,
        p0=tuple(float(c) for c in p0),
        p1=tuple(float(c) for c in p1_arr),
    )


###############################################################################
# Energy and length functionals
###############################################################################


def energy(ts: np.ndarray, gamma_dot: np.ndarray, method: str = "monte-carlo") -> float:
    """Estimate of the curve energy ``int_0^1 |gamma'(t)|^2 dt``.

    Monte-Carlo treats ``ts`` as uniform draws on [0,1] (plain mean);
    trapezoid treats them as a sorted quadrature grid.
    """
    speed_sq = np.sum(np.asarray(gamma_dot, dtype=float) ** 2, axis=-1)
    if method == "monte-carlo":
        return float(np.mean(speed_sq))
    if method == "trapezoid":
        return float(_trapezoid(speed_sq, np.asarray(ts, dtype=float)))
    raise ValueError(f"unknown quadrature method {method!r}")


def arc_length(ts: np.ndarray, gamma_dot: np.ndarray, method: str = "monte-carlo") -> float:
    """Estimate of the arc length ``int_0^1 |gamma'(t)| dt`` (same modes)."""
    speed = np.linalg.norm(np.asarray(gamma_dot, dtype=float), axis=-1)
    if method == "monte-carlo":
        return float(np.mean(speed))
    if method == "trapezoid":
        return float(_trapezoid(speed, np.asarray(ts, dtype=float)))
    raise ValueError(f"unknown quadrature method {method!r}")


###############################################################################
# Tape graph
###############################################################################


def _condition_graph(tape: Tape, spec: ManifoldSpec, gamma: Var, gamma_dd: Var,
                     lam: Var, gamma0: Var, gamma1: Var, gamma1_dot: Var,
                     lam_f: Var, inv_n: Var):
    """Record the geodesic residual norms; shared by training and replay.

    The terminal conditions come in two flavours.  With a free boundary the
    endpoint must land on the stopping set and meet it orthogonally, which is
    the transversality pair below.  With a pinned endpoint the squared
    distance ``phi`` degenerates (its gradient vanishes exactly at the
    solution, so ``gamma'(1) = lam_f grad phi`` has no finite solution) and
    the classical system replaces both terms with the point condition
    ``gamma(1) = p1``.
    """
    psi1 = spec.f_expr(tape, gamma)
    psi2 = tape.sub(tape.mul(lam, spec.grad_f_expr(tape, gamma)), gamma_dd)
    conditions = {
        "psi1_surface": tape.mul(inv_n, tape.sum_all(tape.square(psi1))),
        "psi2_geodesic": tape.mul(inv_n, tape.sum_all(tape.square(psi2))),
    }
    boundaries = {
        "initial_point": tape.sum_all(tape.square(tape.sub(gamma0, _row(tape, spec.p0))))
    }
    if spec.p1 is None:
        psi3 = tape.sub(gamma1_dot, tape.mul(lam_f, spec.grad_phi_expr(tape, gamma1)))
        conditions["psi3_transversality"] = tape.sum_all(tape.square(psi3))
        conditions["stopping_set"] = tape.sum_all(tape.square(spec.phi_expr(tape, gamma1)))
    else:
        boundaries["terminal_point"] = tape.sum_all(
            tape.square(tape.sub(gamma1, _row(tape, spec.p1)))
        )
    return conditions, boundaries


class GeodesicProblem:
    """Trainable geodesic with curve and multiplier nets on an order-2 tape."""

    def __init__(self, spec: ManifoldSpec, n_points: int = 5000, seed: int = 0,
                 hidden: tuple = (64, 64, 64, 64, 64)):
        self.spec = spec
        self.n_points = n_points
        self.curve_spec = MlpSpec(1, 3, hidden, head="linear")
        self.mult_spec = MlpSpec(1, 1, hidden, head="linear")
        self.lam_f = LearnableScalar("lam_f", init=0.0)
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        add_mlp(store, "g/", self.curve_spec, rng)
        add_mlp(store, "lm/", self.mult_spec, rng)
        store.add("lam_f", np.asarray(self.lam_f.init))
        self.store = store.freeze()
        self._build_tape()

    def _build_tape(self):
        n = self.n_points
        tape = Tape(order=2)
        t = tape.input("t", (n, 1), seed=True)
        gamma = mlp_forward(tape, self.store, "g/", self.curve_spec, t)
        lam = mlp_forward(tape, self.store, "lm/", self.mult_spec, t)
        gamma_dd = tape.deriv(gamma, 2)
        t1 = tape.constant(np.array([[1.0]]), d1=np.array([[1.0]]))
        gamma1 = mlp_forward(tape, self.store, "g/", self.curve_spec, t1)
        gamma1_dot = tape.deriv(gamma1, 1)
        t0 = tape.constant(np.zeros((1, 1)))
        gamma0 = mlp_forward(tape, self.store, "g/", self.curve_spec, t0)
        lam_f = tape.reshape(tape.param(self.store, "lam_f"), (1, 1))
        inv_n = tape.constant(np.asarray(1.0 / n))
        self.conditions, self.boundaries = _condition_graph(
            tape, self.spec, gamma, gamma_dd, lam, gamma0, gamma1,
            gamma1_dot, lam_f, inv_n,
        )
        self.total_loss = weighted_total(tape, self.conditions, self.boundaries)
        self.tape = tape

    # -- training protocol ---------------------------------------------------

    def prepare_epoch(self, rng: np.random.Generator, n_points: int) -> None:
        if n_points != self.n_points:
            raise ValueError(
                f"problem was built for {self.n_points} points per epoch, got {n_points}"
            )
        self.tape.set_input("t", rng.uniform(0.0, 1.0, size=(n_points, 1)))
        self.tape.forward()

    def report(self) -> ResidualReport:
        return ResidualReport(
            conditions={k: float(v.value) for k, v in self.conditions.items()},
            boundaries={k: float(v.value) for k, v in self.boundaries.items()},
        )

    def scalar_values(self) -> dict:
        return {"lam_f": self.store.get_scalar("lam_f")}

    def post_step(self) -> None:
        pass

    # -- evaluation ------------------------------------------------------------

    def curve_at(self, ts) -> np.ndarray:
        return mlp_value(self.store, "g/", self.curve_spec, np.atleast_1d(ts)[:, None])

    def multiplier_at(self, ts) -> np.ndarray:
        return mlp_value(self.store, "lm/", self.mult_spec, np.atleast_1d(ts)[:, None])

    def curve_derivatives(self, ts, order: int = 1):
        """Curve values and derivative rows on an arbitrary grid."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        tape = Tape(order=order)
        t = tape.input("t", (ts.size, 1), seed=True)
        tape.set_input("t", ts[:, None])
        gamma = mlp_forward(tape, self.store, "g/", self.curve_spec, t)
        tape.forward()
        out = [gamma.value] + [gamma.deriv(k) for k in range(1, order + 1)]
        return tuple(out)

    def terminal_multiplier(self) -> float:
        return self.store.get_scalar("lam_f")

    def checkpoint_meta(self) -> dict:
        return {
            "problem": f"geodesic-{self.spec.name}",
            "hidden": list(self.curve_spec.hidden),
        }


def surface_project(spec: ManifoldSpec, pts: np.ndarray, n_iters: int = 50) -> np.ndarray:
    """Pull ambient points onto ``f = 0`` by Newton steps along ``grad f``."""
    pts = np.asarray(pts, dtype=float).copy()
    for _ in range(n_iters):
        vals = spec.f(pts)
        if np.max(np.abs(vals)) < 1e-14:
            break
        grads = spec.grad_f(pts)
        denom = np.maximum(np.sum(grads * grads, axis=-1), 1e-30)
        pts = pts - (vals / denom)[..., None] * grads
    return pts


def _chord_profile(spec: ManifoldSpec, resolution: int = 2049):
    """Warm-start curve for fixed-endpoint runs: the projected straight chord.

    The chord from p0 to p1 is pushed onto the surface pointwise and then
    reparameterized to constant speed.  That pins both endpoints, zeroes the
    membership residual, and keeps the initial acceleration down to the
    curve's curvature (an affine clock would add a large tangential
    component, and the first epochs would tear the fit apart before the
    boundary terms could recover it).  The projected chord is generally well
    longer than the geodesic, so training still does the shortening.
    Free-boundary instances get no warm start; their endpoint is exactly
    what training must discover.
    """
    p0 = np.asarray(spec.p0, dtype=float)
    p1 = np.asarray(spec.p1, dtype=float)
    grid = np.linspace(0.0, 1.0, resolution)[:, None]
    dense = surface_project(spec, (1.0 - grid) * p0 + grid * p1)
    arcs = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))]
    )
    arcs /= arcs[-1]

    def profile(ts):
        ts = np.asarray(ts, dtype=float)
        return np.stack(
            [np.interp(ts, arcs, dense[:, j]) for j in range(3)], axis=-1
        )

    return profile


def train_geodesic(problem: GeodesicProblem, cfg: TrainConfig,
                   log_every: int = 1, callback=None) -> TrainResult:
    """Residual training, preceded by a chord fit when the endpoint is fixed.

    Starting a fixed-endpoint run from a fresh network puts the whole curve
    near the origin, so the two point residuals dominate the loss for tens of
    thousands of epochs before any geometry is learned.  Fitting the curve
    net to the projected chord first removes that stall.
    """
    if problem.spec.p1 is not None:
        ts = np.linspace(0.0, 1.0, 256)
        fit_network(problem.store, "g/", problem.curve_spec, ts[:, None],
                    _chord_profile(problem.spec)(ts), tol=cfg.pretrain_tol,
                    max_steps=cfg.pretrain_steps)
    return train(problem, cfg, log_every=log_every, callback=callback)


###############################################################################
# Replay closure and evaluation
###############################################################################


def geodesic_replay_report(spec: ManifoldSpec, curve, lam_fn, lam_f: float,
                           ts: np.ndarray) -> ResidualReport:
    """Evaluate the residuals on a closed-form curve.

    ``curve(ts) -> (gamma, gamma', gamma'')`` rows; ``lam_fn(ts) -> (n,)`` or
    scalar multiplier values.  Everything enters the same graph builder the
    trained problem uses, as constants with hand-filled derivative channels.
    """
    ts = np.asarray(ts, dtype=float)
    n = ts.size
    g, gd, gdd = curve(ts)
    lam_vals = np.broadcast_to(np.asarray(lam_fn(ts), dtype=float).reshape(-1, 1), (n, 1))
    g1, g1d, _ = curve(np.array([1.0]))
    g0, _, _ = curve(np.array([0.0]))
    tape = Tape(order=2)
    gamma = tape.constant(g, d1=gd, d2=gdd)
    lam = tape.constant(lam_vals)
    gamma1 = tape.constant(g1, d1=g1d)
    gamma0 = tape.constant(g0)
    lam_f_var = tape.constant(np.asarray([[float(lam_f)]]))
    inv_n = tape.constant(np.asarray(1.0 / n))
    conditions, boundaries = _condition_graph(
        tape, spec, gamma, tape.deriv(gamma, 2), lam, gamma0, gamma1,
        tape.deriv(gamma1, 1), lam_f_var, inv_n,
    )
    tape.forward()
    return ResidualReport(
        conditions={k: float(v.value) for k, v in conditions.items()},
        boundaries={k: float(v.value) for k, v in boundaries.items()},
    )


def sphere_reference_length(p0) -> float:
    """Meridian arc length from ``p0`` on the unit sphere down to the equator."""
    z = float(np.clip(np.asarray(p0, dtype=float)[2], -1.0, 1.0))
    return abs(np.pi / 2.0 - np.arccos(z))


def evaluate_geodesic(problem: GeodesicProblem, reference_length: float | None = None,
                      n_grid: int = 1000, cv_grid: int = 200) -> dict:
    """Metrics of a trained curve: quadrature functionals plus residual checks."""
    spec = problem.spec
    ts = np.linspace(0.0, 1.0, n_grid)
    g, gd, gdd = problem.curve_derivatives(ts, order=2)
    speed = np.linalg.norm(gd, axis=1)
    length = arc_length(ts, gd, method="trapezoid")
    curve_energy = energy(ts, gd, method="trapezoid")
    cv_ts = np.linspace(0.0, 1.0, cv_grid)
    _, cv_gd = problem.curve_derivatives(cv_ts, order=1)
    cv_speed = np.linalg.norm(cv_gd, axis=1)
    speed_cv = float(np.std(cv_speed) / max(np.mean(cv_speed), 1e-30))
    max_f = float(np.max(np.abs(spec.f(g))))
    # acute angle between the terminal velocity and the stopping-set normal
    v1 = gd[-1]
    n1 = spec.grad_phi(g[-1:])[0]
    denom = np.linalg.norm(v1) * np.linalg.norm(n1)
    if denom > 1e-12:
        cosang = abs(float(v1 @ n1)) / denom
        angle = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    else:
        angle = None
    # tangential component of the acceleration, relative (zero for a geodesic)
    acc_norm = np.linalg.norm(gdd, axis=1)
    ok = (acc_norm > 1e-12) & (speed > 1e-12)
    tangency = np.abs(np.sum(gdd * gd, axis=1))[ok] / (acc_norm[ok] * speed[ok])
    metrics = {
        "length": length,
        "energy": curve_energy,
        "length_sq_minus_energy": length * length - curve_energy,
        "speed_cv": speed_cv,
        "max_f": max_f,
        "transversality_angle_deg": angle,
        "acceleration_tangency_defect": float(tangency.max()) if tangency.size else 0.0,
        "endpoint_phi": float(spec.phi(g[-1:])[0]),
        "lam_f": problem.terminal_multiplier(),
    }
    if spec.p1 is not None:
        metrics["endpoint_distance"] = float(np.linalg.norm(g[-1] - np.asarray(spec.p1)))
    if reference_length is None and spec.name == "sphere":
        reference_length = sphere_reference_length(spec.p0)
    if reference_length is not None:
        metrics["reference_length"] = float(reference_length)
        metrics["length_rel_error"] = abs(length - reference_length) / max(
            abs(reference_length), 1e-12
        )
    return metrics
