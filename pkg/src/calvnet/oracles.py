"""Classical numerical baselines used to judge the trained estimators.

Nothing in this module learns: it integrates the known optimality systems
(filter Riccati equation, double-integrator bang-bang arcs, discrete
geodesics) with standard methods, and the training side is measured against
these results.  Keeping the two routes independent is the point; none of this
code touches the tape or the networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OdeProblem",
    "RolloutResult",
    "rk4_integrate",
    "RiccatiSolution",
    "riccati_solve",
    "kalman_costate_solve",
    "rollout_kalman",
    "BangBangSolution",
    "bangbang_analytic",
    "UnsupportedInitialState",
    "MinTimeRollout",
    "rollout_mintime",
    "PolylineResult",
    "polyline_geodesic_oracle",
    "ConvergenceFailure",
    "ProjectionFailure",
]


class ConvergenceFailure(RuntimeError):
    """An iterative oracle did not reach its tolerance within its cap."""


class ProjectionFailure(RuntimeError):
    """Newton reprojection onto the constraint surface failed."""


class UnsupportedInitialState(NotImplementedError):
    """The closed-form minimum-time solution does not cover this start."""


###############################################################################
# Fixed-step Runge-Kutta
###############################################################################


@dataclass(frozen=True)
class OdeProblem:
    """Right-hand side, initial state and integration window for RK4."""

    rhs: Callable[[float, np.ndarray], np.ndarray]
    y0: np.ndarray
    t0: float
    t1: float
    h: float = 1e-3


@dataclass
class RolloutResult:
    ts: np.ndarray
    ys: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.ys[-1]


def rk4_integrate(problem: OdeProblem) -> RolloutResult:
    """Classic fourth-order Runge-Kutta with a fixed step.

    The window is divided into ``round(span / h)`` equal steps so the end
    point is hit exactly; integrating backwards (t1 < t0) works the same way
    with a negative step.
    """
    y = np.asarray(problem.y0, dtype=float).copy()
    span = problem.t1 - problem.t0
    if span == 0.0:
        return RolloutResult(np.array([problem.t0]), y[None])
    if problem.h <= 0.0:
        raise ValueError(f"step size must be positive, got {problem.h}")
    n = max(1, int(round(abs(span) / problem.h)))
    h = span / n
    rhs = problem.rhs
    ts = problem.t0 + h * np.arange(n + 1)
    ys = np.empty((n + 1,) + y.shape)
    ys[0] = y
    for i in range(n):
        t = ts[i]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ys[i + 1] = y
    return RolloutResult(ts, ys)


###############################################################################
# Filter Riccati equation
###############################################################################


@dataclass
class RiccatiSolution:
    ts: np.ndarray            # (n_steps+1,)
    sigmas: np.ndarray        # (n_steps+1, n, n)
    gains: np.ndarray         # (n_steps+1, n, m), optimal gain sigma C^T R^-1
    sigma_inf: np.ndarray     # steady-state covariance
    gain_inf: np.ndarray
    are_residual: float       # Frobenius norm of the algebraic equation at sigma_inf
    settle_time: float        # time at which the derivative norm fell below tol

    def trace_at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.ts - t)))
        return float(np.trace(self.sigmas[i]))


def _riccati_rhs(system) -> Callable:
    a, b, c, q, r = system.A, system.B, system.C, system.Q, system.R
    bqb = b @ q @ b.T
    rinv_c = np.linalg.solve(r, c)

    def rhs(_t, y):
        n = a.shape[0]
        s = y.reshape(n, n)
        ds = a @ s + s @ a.T + bqb - s @ c.T @ rinv_c @ s
        return ds.ravel()

    return rhs


def riccati_solve(system, h: float = 1e-3, settle_tol: float = 1e-8,
                  t_cap: float = 100.0) -> RiccatiSolution:
    """Integrate the filter covariance ODE and continue to steady state.

    The trajectory covers ``[0, system.T]``; afterwards integration continues
    (not recorded) until the derivative norm drops below ``settle_tol``,
    giving the steady-state covariance and the optimal gain.  A cap of
    ``t_cap`` guards against systems that do not settle.
    """
    n = system.A.shape[0]
    rhs = _riccati_rhs(system)
    run = rk4_integrate(OdeProblem(rhs, system.sigma0.ravel(), 0.0, system.T, h))
    sigmas = run.ys.reshape(-1, n, n)
    rinv = np.linalg.inv(system.R)
    gains = sigmas @ system.C.T @ rinv

    y = run.ys[-1].copy()
    t = system.T
    settle = t
    while True:
        dy = rhs(t, y)
        if np.linalg.norm(dy) < settle_tol:
            settle = t
            break
        if t >= t_cap:
            raise ConvergenceFailure(
                f"covariance derivative still {np.linalg.norm(dy):.2e} at t={t_cap}"
            )
        step = rk4_integrate(OdeProblem(rhs, y, t, min(t + 1.0, t_cap), h))
        y = step.ys[-1]
        t = step.ts[-1]
    sigma_inf = y.reshape(n, n)
    sigma_inf = 0.5 * (sigma_inf + sigma_inf.T)
    gain_inf = sigma_inf @ system.C.T @ rinv
    are = (
        system.A @ sigma_inf
        + sigma_inf @ system.A.T
        + system.B @ system.Q @ system.B.T
        - sigma_inf @ system.C.T @ rinv @ system.C @ sigma_inf
    )
    return RiccatiSolution(
        ts=run.ts,
        sigmas=sigmas,
        gains=gains,
        sigma_inf=sigma_inf,
        gain_inf=gain_inf,
        are_residual=float(np.linalg.norm(are)),
        settle_time=settle,
    )


def kalman_costate_solve(system, h: float = 1e-3):
    """Joint backward integration of covariance and costate from t = T.

    The costate of the trace-minimisation problem obeys
    ``lam_dot = -lam (A - G C) - (A - G C)^T lam`` with ``lam(T) = I`` and the
    optimal gain ``G = sigma C^T R^-1``.  Integrating the covariance backward
    alongside avoids interpolating gains.  Returns ``(ts, sigmas, lams)`` in
    forward time order.
    """
    n = system.A.shape[0]
    fwd = riccati_solve(system, h=h)
    rinv = np.linalg.inv(system.R)
    a, c = system.A, system.C
    bqb = system.B @ system.Q @ system.B.T

    def rhs(_t, y):
        s = y[: n * n].reshape(n, n)
        lam = y[n * n :].reshape(n, n)
        g = s @ c.T @ rinv
        m = a - g @ c
        ds = a @ s + s @ a.T + bqb - s @ c.T @ rinv @ c @ s
        dlam = -lam @ m - m.T @ lam
        return np.concatenate([ds.ravel(), dlam.ravel()])

    y_t = np.concatenate([fwd.sigmas[-1].ravel(), np.eye(n).ravel()])
    run = rk4_integrate(OdeProblem(rhs, y_t, system.T, 0.0, h))
    ts = run.ts[::-1]
    sigmas = run.ys[::-1, : n * n].reshape(-1, n, n)
    lams = run.ys[::-1, n * n :].reshape(-1, n, n)
    return ts, sigmas, lams


def rollout_kalman(system, gain_source: Callable[[np.ndarray], np.ndarray],
                   t_end: float | None = None, h: float = 1e-3,
                   divergence_cap: float = 1e6):
    """Integrate the filter covariance under an arbitrary gain policy.

    ``gain_source(sigma) -> gain`` is queried at every Runge-Kutta stage with
    the current covariance (this is how a trained gain estimator is rolled
    out).  Returns ``(result, diverged)``; integration stops early once the
    covariance norm exceeds ``divergence_cap``.
    """
    n = system.A.shape[0]
    a, c = system.A, system.C
    bqb = system.B @ system.Q @ system.B.T
    r = system.R

    def rhs(_t, y):
        s = y.reshape(n, n)
        g = np.asarray(gain_source(s), dtype=float).reshape(n, -1)
        m = a - g @ c
        ds = m @ s + s @ m.T + bqb + g @ r @ g.T
        return ds.ravel()

    t_end = system.T if t_end is None else t_end
    n_steps = max(1, int(round(t_end / h)))
    step = t_end / n_steps
    y = system.sigma0.ravel().copy()
    ts = [0.0]
    ys = [y.copy()]
    diverged = False
    t = 0.0
    for _ in range(n_steps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * step, y + 0.5 * step * k1)
        k3 = rhs(t + 0.5 * step, y + 0.5 * step * k2)
        k4 = rhs(t + step, y + step * k3)
        y = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += step
        ts.append(t)
        ys.append(y.copy())
        if not np.all(np.isfinite(y)) or np.linalg.norm(y) > divergence_cap:
            diverged = True
            break
    result = RolloutResult(np.asarray(ts), np.asarray(ys).reshape(-1, n, n))
    return result, diverged


###############################################################################
# Minimum-time double integrator
###############################################################################


@dataclass
class BangBangSolution:
    """Closed-form minimum-time arcs for the double integrator to the origin.

    The control is ``a`` on ``[0, t_switch)`` and ``-a`` on ``[t_switch, t_f]``
    with ``|a| = 1``; the costate is ``lam1 = c1`` constant and
    ``lam2 = c2 - c1 t`` affine, vanishing exactly at the switch.
    """

    t_f: float
    t_switch: float
    a: float
    c1: float
    c2: float
    x0: tuple

    def control(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < self.t_switch, self.a, -self.a)

    def costate(self, t):
        t = np.asarray(t, dtype=float)
        lam1 = np.full_like(t, self.c1)
        lam2 = self.c2 - self.c1 * t
        return np.stack([lam1, lam2], axis=-1)

    def state(self, t):
        t = np.asarray(t, dtype=float)
        p0, v0 = self.x0
        a, tm = self.a, self.t_switch
        first = t < tm
        x1 = np.where(
            first,
            p0 + v0 * t + 0.5 * a * t * t,
            p0 + v0 * t + 2.0 * a * tm * t - a * tm * tm - 0.5 * a * t * t,
        )
        x2 = np.where(first, v0 + a * t, v0 + 2.0 * a * tm - a * t)
        return np.stack([x1, x2], axis=-1)


def bangbang_analytic(x0=(1.0, 0.0)) -> BangBangSolution:
    """Solve the two-arc case analytically; raises for unsupported starts.

    Only genuinely two-phase solutions are produced (the start must not
    already lie at the origin or exactly on the final braking arc).
    """
    p0, v0 = float(x0[0]), float(x0[1])
    if abs(p0) < 1e-12 and abs(v0) < 1e-12:
        raise UnsupportedInitialState("already at the origin")
    candidates = []
    for a in (1.0, -1.0):
        disc = 0.5 * v0 * v0 - a * p0
        if disc < 0.0:
            continue
        for root_sign in (1.0, -1.0):
            tm = (-v0 + root_sign * np.sqrt(disc)) / a
            if tm <= 1e-12:
                continue
            tf = 2.0 * tm + v0 / a
            if tf < tm - 1e-12:
                continue
            candidates.append((tf, tm, a))
    if not candidates:
        raise UnsupportedInitialState(
            f"no two-phase bang-bang arc found for x0={x0}"
        )
    tf, tm, a = min(candidates)
    # costate scale from the transversality condition 1 + lam2(tf) u(tf) = 0
    # with u = -a after the switch, plus lam2(t_switch) = 0
    c1 = -a / (tf - tm) if tf > tm else 0.0
    c2 = c1 * tm
    if tf <= tm:
        raise UnsupportedInitialState(
            f"degenerate single-arc solution for x0={x0} is not covered"
        )
    sol = BangBangSolution(t_f=tf, t_switch=tm, a=a, c1=c1, c2=c2, x0=(p0, v0))
    final = sol.state(tf)
    if np.linalg.norm(final) > 1e-9:
        raise UnsupportedInitialState(
            f"closed form failed to reach the origin for x0={x0}"
        )
    return sol


@dataclass
class MinTimeRollout:
    ts: np.ndarray
    xs: np.ndarray
    hit: bool
    hit_time: float | None
    min_dist: float


def rollout_mintime(u_source: Callable, x0=(1.0, 0.0), eps: float = 0.05,
                    t_max: float = 3.0, h: float = 1e-3) -> MinTimeRollout:
    """Integrate ``x1' = x2, x2' = u(t)`` and report when ``|x| <= eps``.

    The hit test runs at step boundaries.  Integration always continues to
    ``t_max`` so the trajectory can be inspected past the hit.
    """

    def rhs(t, x):
        return np.array([x[1], float(np.asarray(u_source(t)).ravel()[0])])

    run = rk4_integrate(OdeProblem(rhs, np.asarray(x0, dtype=float), 0.0, t_max, h))
    dists = np.linalg.norm(run.ys, axis=1)
    inside = np.nonzero(dists <= eps)[0]
    hit = inside.size > 0
    return MinTimeRollout(
        ts=run.ts,
        xs=run.ys,
        hit=hit,
        hit_time=float(run.ts[inside[0]]) if hit else None,
        min_dist=float(dists.min()),
    )


###############################################################################
# Discrete geodesics
###############################################################################


@dataclass
class PolylineResult:
    points: np.ndarray        # (K+1, 3)
    length: float
    energy: float             # discrete energy K * sum |segment|^2
    energy_history: np.ndarray = field(repr=False, default=None)


def _newton_project(manifold, pts: np.ndarray, tol: float = 1e-12,
                    max_iter: int = 50) -> np.ndarray:
    """Pull points back onto f = 0 along the constraint gradient."""
    pts = np.array(pts, dtype=float)
    for _ in range(max_iter):
        vals = np.atleast_1d(manifold.f(pts))
        if np.max(np.abs(vals)) < tol:
            return pts
        grads = manifold.grad_f(pts)
        denom = np.sum(grads * grads, axis=-1)
        if np.any(denom < 1e-14):
            raise ProjectionFailure("vanishing constraint gradient during projection")
        pts = pts - (vals / denom)[..., None] * grads
    raise ProjectionFailure(
        f"surface projection stalled at |f| = {np.max(np.abs(vals)):.2e}"
    )


def polyline_geodesic_oracle(manifold, n_segments: int = 256,
                             n_iters: int = 20000,
                             step_scale: float = 0.05) -> PolylineResult:
    """Discrete geodesic by projected gradient descent on the segment energy.

    A polyline with ``n_segments`` segments starts as the chord from the
    manifold's fixed start point to an initial stopping-set guess, projected
    onto the surface.  Each iteration takes a gradient step on
    ``K * sum |x_{k+1} - x_k|^2`` with step ``step_scale / K``, reprojects
    interior vertices onto f = 0 by Newton, and maps the last vertex through
    the manifold's stopping-set projection.  The start stays pinned.
    """
    K = n_segments
    p0 = np.asarray(manifold.p0, dtype=float)
    p_end = np.asarray(manifold.stop_project(p0), dtype=float)
    alphas = np.linspace(0.0, 1.0, K + 1)[:, None]
    pts = (1.0 - alphas) * p0 + alphas * p_end
    pts[1:] = _newton_project(manifold, pts[1:])
    pts[-1] = manifold.stop_project(pts[-1])
    step = step_scale / K
    history = np.empty(n_iters + 1)
    for it in range(n_iters):
        seg = pts[1:] - pts[:-1]
        history[it] = K * float(np.sum(seg * seg))
        grad_interior = 2.0 * K * (2.0 * pts[1:-1] - pts[:-2] - pts[2:])
        grad_end = 2.0 * K * (pts[-1] - pts[-2])
        pts[1:-1] -= step * grad_interior
        pts[-1] -= step * grad_end
        pts[1:-1] = _newton_project(manifold, pts[1:-1])
        pts[-1] = manifold.stop_project(pts[-1])
    seg = pts[1:] - pts[:-1]
    history[n_iters] = K * float(np.sum(seg * seg))
    return PolylineResult(
        points=pts,
        length=float(np.sum(np.linalg.norm(seg, axis=1))),
        energy=history[-1],
        energy_history=history,
    )
