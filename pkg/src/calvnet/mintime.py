"""Minimum-time double integrator with a learned final time.

Drive ``x1' = x2, x2' = u`` with ``|u| <= 1`` from a given start to the
origin in the least time.  The time-Hamiltonian is

    H = 1 + lam1 x2 + lam2 u

whose minimiser over the box is ``u* = -sign(lam2)``, so the optimal control
is bang-bang with the switch at the costate zero crossing.  Three estimators
are trained: state and costate networks of time, and a bounded control
network that reads the concatenated (state, costate) estimate, learning the
argmin map itself.  The horizon end ``t_f`` is a trainable scalar clamped to
(0, T]; terminal residuals are evaluated *at* the current t_f through the
network inputs, which is how its gradient arises.

Since the pointwise argmin and the residual system supervise different
players, training alternates (see :func:`calvnet.training.alternating_train`)
between Hamiltonian descent on the control at random (x, lam) draws and one
residual step on everything else.  The regret form of the stationarity
residual, ``H(x, u_theta, lam) - H(x, u*, lam)``, is used for samples whose
``|lam2|`` exceeds a small tolerance; closer to the switch the argmin is
numerically indeterminate and those samples are dropped.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Var
from .networks import LearnableScalar, MlpSpec, ParameterStore, add_mlp, mlp_forward, mlp_value
from .oracles import BangBangSolution, rollout_mintime
from .training import (ResidualReport, TrainConfig, TrainResult, alternating_train,
                       fit_network, pretrain_costate, weighted_total)

__all__ = [
    "dynamics_rhs",
    "hamiltonian",
    "control_argmin",
    "MinTimeProblem",
    "train_mintime",
    "mintime_replay_report",
    "evaluate_mintime",
    "SWITCH_TOL",
]

SWITCH_TOL = 1e-3   # |lam2| below this: argmin indeterminate, sample dropped
T_F_FLOOR = 1e-3    # clamp floor for the learned final time


def dynamics_rhs(x: np.ndarray, u) -> np.ndarray:
    """Double-integrator right-hand side, vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    u_arr = np.broadcast_to(np.asarray(u, dtype=float), x[..., 1].shape)
    return np.stack([x[..., 1], u_arr], axis=-1)


def hamiltonian(x: np.ndarray, u, lam: np.ndarray) -> np.ndarray:
    """Time-optimal Hamiltonian ``1 + lam . f(x, u)``."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    if u_arr.ndim == x.ndim:
        u_arr = u_arr[..., 0]
    return 1.0 + lam[..., 0] * x[..., 1] + lam[..., 1] * u_arr


def control_argmin(lam2, tol: float = SWITCH_TOL) -> np.ndarray:
    """Box-constrained minimiser of H in u: ``-sign(lam2)``, 0 when ambiguous."""
    lam2 = np.asarray(lam2, dtype=float)
    out = -np.sign(lam2)
    return np.where(np.abs(lam2) <= tol, 0.0, out)


###############################################################################
# Tape graph
###############################################################################


def _col(tape: Tape, v: Var, j: int) -> Var:
    return tape.take_cols(v, j, j + 1)


def _masked_norm(tape: Tape, parts: list, mask: Var, inv_count: Var) -> Var:
    total = None
    for part in parts:
        s = tape.sum_all(tape.square(tape.mul(part, mask)))
        total = s if total is None else tape.add(total, s)
    return tape.mul(inv_count, total)


def _condition_graph(tape: Tape, x: Var, x_dot: Var, lam: Var, lam_dot: Var,
                     u: Var, x_tf: Var, lam_tf: Var, u_tf: Var, x_0: Var,
                     u_star: Var, path_mask: Var, inv_path: Var,
                     regret_mask: Var, inv_regret: Var, x_init: np.ndarray,
                     x_goal: np.ndarray):
    """Record the minimum-time residual norms; shared by training and replay."""
    psi1_parts = [
        tape.sub(_col(tape, x_dot, 0), _col(tape, x, 1)),
        tape.sub(_col(tape, x_dot, 1), u),
    ]
    psi2_parts = [
        _col(tape, lam_dot, 0),
        tape.add(_col(tape, lam_dot, 1), _col(tape, lam, 0)),
    ]
    # Hamiltonian regret lam2 (u - u*) >= 0, zero iff the control is optimal
    regret = tape.mul(_col(tape, lam, 1), tape.sub(u, u_star))
    psi3 = _masked_norm(tape, [regret], regret_mask, inv_regret)
    terminal = tape.sub(x_tf, tape.constant(np.asarray(x_goal, dtype=float)[None]))
    trans = tape.shift(
        tape.add(
            tape.mul(_col(tape, lam_tf, 0), _col(tape, x_tf, 1)),
            tape.mul(_col(tape, lam_tf, 1), u_tf),
        ),
        1.0,
    )
    conditions = {
        "psi1_dynamics": _masked_norm(tape, psi1_parts, path_mask, inv_path),
        "psi2_costate": _masked_norm(tape, psi2_parts, path_mask, inv_path),
        "psi3_regret": psi3,
        "terminal_state": tape.sum_all(tape.square(terminal)),
        "transversality": tape.sum_all(tape.square(trans)),
    }
    boundaries = {
        "initial_state": tape.sum_all(
            tape.square(tape.sub(x_0, tape.constant(np.asarray(x_init, dtype=float)[None])))
        )
    }
    return conditions, boundaries


class MinTimeProblem:
    """Trainable minimum-time transfer with state, costate and control nets."""

    def __init__(self, x_init=(1.0, 0.0), x_goal=(0.0, 0.0), horizon: float = 3.0,
                 n_points: int = 5000, seed: int = 0,
                 hidden: tuple = (64, 64, 64, 64, 64),
                 control_batch: int | None = None):
        self.x_init = np.asarray(x_init, dtype=float)
        self.x_goal = np.asarray(x_goal, dtype=float)
        self.horizon = float(horizon)
        self.n_points = n_points
        self._control_batch = control_batch or n_points
        self.state_spec = MlpSpec(1, 2, hidden, head="linear")
        self.costate_spec = MlpSpec(1, 2, hidden, head="linear")
        self.control_spec = MlpSpec(4, 1, hidden, head="bounded")
        self.costate_prefix = "lam/"
        self.t_f = LearnableScalar("t_f", init=self.horizon, lower=T_F_FLOOR,
                                   upper=self.horizon)
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        add_mlp(store, "x/", self.state_spec, rng)
        add_mlp(store, "lam/", self.costate_spec, rng)
        add_mlp(store, "u/", self.control_spec, rng)
        store.add("t_f", np.asarray(self.t_f.init))
        self.store = store.freeze()
        self._build_tape()
        self._build_control_tape()

    def _build_tape(self):
        n = self.n_points
        tape = Tape(order=1)
        t = tape.input("t", (n, 1), seed=True)
        x = mlp_forward(tape, self.store, "x/", self.state_spec, t)
        lam = mlp_forward(tape, self.store, "lam/", self.costate_spec, t)
        self._stage1_end = max(x.idx, lam.idx)
        x_dot = tape.deriv(x, 1)
        lam_dot = tape.deriv(lam, 1)
        u = mlp_forward(tape, self.store, "u/", self.control_spec,
                        tape.concat([x, lam]))
        u_star = tape.input("u_star", (n, 1))
        path_mask = tape.input("path_mask", (n, 1))
        inv_path = tape.input("inv_path", ())
        regret_mask = tape.input("regret_mask", (n, 1))
        inv_regret = tape.input("inv_regret", ())
        # terminal quantities at the learnable final time
        tf_param = tape.param(self.store, "t_f")
        tf_in = tape.reshape(tf_param, (1, 1))
        x_tf = mlp_forward(tape, self.store, "x/", self.state_spec, tf_in)
        lam_tf = mlp_forward(tape, self.store, "lam/", self.costate_spec, tf_in)
        u_tf = mlp_forward(tape, self.store, "u/", self.control_spec,
                           tape.concat([x_tf, lam_tf]))
        t0 = tape.constant(np.zeros((1, 1)))
        x_0 = mlp_forward(tape, self.store, "x/", self.state_spec, t0)
        self.conditions, self.boundaries = _condition_graph(
            tape, x, x_dot, lam, lam_dot, u, x_tf, lam_tf, u_tf, x_0,
            u_star, path_mask, inv_path, regret_mask, inv_regret,
            self.x_init, self.x_goal,
        )
        self.total_loss = weighted_total(tape, self.conditions, self.boundaries)
        self.tape = tape
        self._x_var = x
        self._lam_var = lam

    def _build_control_tape(self):
        m = self._control_batch
        tape = Tape(order=0)
        xl = tape.input("xl", (m, 4))
        u = mlp_forward(tape, self.store, "u/", self.control_spec, xl)
        x2 = tape.take_cols(xl, 1, 2)
        l1 = tape.take_cols(xl, 2, 3)
        l2 = tape.take_cols(xl, 3, 4)
        h_sum = tape.sum_all(tape.add(tape.mul(l1, x2), tape.mul(l2, u)))
        self.control_loss = tape.shift(tape.scale(h_sum, 1.0 / m), 1.0)
        self.control_tape = tape

    # -- training protocol --------------------------------------------------

    def prepare_epoch(self, rng: np.random.Generator, n_points: int) -> None:
        if n_points != self.n_points:
            raise ValueError(
                f"problem was built for {self.n_points} points per epoch, got {n_points}"
            )
        ts = rng.uniform(0.0, self.horizon, size=(n_points, 1))
        tape = self.tape
        tape.set_input("t", ts)
        tape.forward(0, self._stage1_end)
        lam2 = self._lam_var.value[:, 1:2]
        u_star = control_argmin(lam2)
        t_f = self.store.get_scalar("t_f")
        path_mask = (ts <= t_f).astype(float)
        regret_mask = path_mask * (np.abs(lam2) > SWITCH_TOL)
        tape.set_input("u_star", u_star)
        tape.set_input("path_mask", path_mask)
        tape.set_input("inv_path", np.asarray(1.0 / max(path_mask.sum(), 1.0)))
        tape.set_input("regret_mask", regret_mask)
        tape.set_input("inv_regret", np.asarray(1.0 / max(regret_mask.sum(), 1.0)))
        tape.forward(self._stage1_end + 1)

    def report(self) -> ResidualReport:
        return ResidualReport(
            conditions={k: float(v.value) for k, v in self.conditions.items()},
            boundaries={k: float(v.value) for k, v in self.boundaries.items()},
        )

    def scalar_values(self) -> dict:
        return {"t_f": self.store.get_scalar("t_f")}

    def post_step(self) -> None:
        self.t_f.clamp(self.store)

    # -- alternating-training hooks ------------------------------------------

    def control_mask(self) -> np.ndarray:
        return self.store.mask("u/")

    def set_control_batch(self, draws: np.ndarray) -> None:
        if draws.shape != (self._control_batch, 4):
            raise ValueError(
                f"control batch must be {(self._control_batch, 4)}, got {draws.shape}"
            )
        self.control_tape.set_input("xl", draws)

    def batch_box(self):
        vals = np.concatenate([self._x_var.value, self._lam_var.value], axis=1)
        return vals.min(axis=0), vals.max(axis=0)

    def initial_box(self, rng: np.random.Generator, n_points: int):
        ts = rng.uniform(0.0, self.horizon, size=(self.n_points, 1))
        self.tape.set_input("t", ts)
        self.tape.forward(0, self._stage1_end)
        return self.batch_box()

    # -- evaluation -----------------------------------------------------------

    def state_at(self, ts) -> np.ndarray:
        return mlp_value(self.store, "x/", self.state_spec, np.atleast_1d(ts)[:, None])

    def costate_at(self, ts) -> np.ndarray:
        return mlp_value(self.store, "lam/", self.costate_spec, np.atleast_1d(ts)[:, None])

    def control_at(self, ts) -> np.ndarray:
        xs = self.state_at(ts)
        lams = self.costate_at(ts)
        return mlp_value(self.store, "u/", self.control_spec,
                         np.concatenate([xs, lams], axis=1))

    def final_time(self) -> float:
        return self.store.get_scalar("t_f")

    def checkpoint_meta(self) -> dict:
        return {
            "problem": "mintime",
            "horizon": self.horizon,
            "hidden": list(self.state_spec.hidden),
        }


def _ramp_profile(problem: MinTimeProblem):
    """Smooth position ramp from start to goal over the sampling horizon.

    Cosine easing keeps the implied velocity zero at both ends and the
    implied acceleration well inside the control bound for the default
    setup, so the profile is a plausible (not optimal) transfer.
    """
    span = problem.x_init[0] - problem.x_goal[0]
    T = problem.horizon

    def profile(ts):
        ts = np.asarray(ts, dtype=float)
        w = 0.5 * (1.0 + np.cos(np.pi * ts / T))
        wd = -0.5 * (np.pi / T) * np.sin(np.pi * ts / T)
        return np.stack([problem.x_goal[0] + span * w, span * wd], axis=-1)

    return profile


def _crossing_profile(problem: MinTimeProblem):
    """Costate pretraining target: affine lam2 with a mid-horizon sign change.

    The transversality condition 1 + lam2(t_f) u(t_f) = 0 has two consistent
    sign pairings, and only one of them lets the trajectory reach the goal.
    A costate whose lam2 starts on one sign and crosses mid-horizon exposes
    both control extremes to the alternating step from the outset; a
    single-sign lam2 locks the control on one extreme and the run stalls.
    The leading sign follows from which side of the braking parabola the
    start lies on (positive for the default start (1, 0): decelerate first).
    """
    p0, v0 = problem.x_init
    s = np.sign(p0 + 0.5 * v0 * abs(v0)) or 1.0
    T = problem.horizon

    def profile(ts):
        ts = np.asarray(ts, dtype=float)
        return np.stack([s * np.ones_like(ts), s * (1.0 - 2.0 * ts / T)], axis=-1)

    return profile


def train_mintime(problem: MinTimeProblem, cfg: TrainConfig, log_every: int = 1,
                  callback=None) -> TrainResult:
    """Pretraining plus alternating training, the full recipe.

    The costate estimator is pushed onto the sign-crossing affine profile
    (see :func:`_crossing_profile`); a near-zero costate would kill every
    Hamiltonian gradient, and a single-sign one locks the control.  The
    state estimator is pushed onto a smooth goal-reaching ramp so the
    terminal residual carries a real gradient in t_f from the first epoch.
    """
    pretrain_costate(problem, _crossing_profile(problem),
                     tol=cfg.pretrain_tol, max_steps=cfg.pretrain_steps)
    ts = np.linspace(0.0, problem.horizon, 256)
    fit_network(problem.store, "x/", problem.state_spec, ts[:, None],
                _ramp_profile(problem)(ts), tol=cfg.pretrain_tol,
                max_steps=cfg.pretrain_steps)
    return alternating_train(problem, cfg, log_every=log_every, callback=callback)


###############################################################################
# Replay closure and evaluation
###############################################################################


def mintime_replay_report(solution: BangBangSolution, ts: np.ndarray,
                          x_init=(1.0, 0.0), x_goal=(0.0, 0.0)) -> ResidualReport:
    """Evaluate the residuals on the closed-form arcs (exactly, via their flow).

    ``ts`` should avoid a neighbourhood of the switch time, where the control
    is discontinuous and the regret samples would be dropped anyway.
    """
    ts = np.asarray(ts, dtype=float)
    n = ts.size
    xs = solution.state(ts)
    lams = solution.costate(ts)
    us = solution.control(ts)[:, None]
    x_dots = dynamics_rhs(xs, us[:, 0])
    lam_dots = np.stack([np.zeros(n), -lams[:, 0]], axis=-1)
    u_star = control_argmin(lams[:, 1:2])
    tape = Tape(order=1)
    x = tape.constant(xs, d1=x_dots)
    lam = tape.constant(lams, d1=lam_dots)
    u = tape.constant(us)
    tf = solution.t_f
    x_tf = tape.constant(solution.state(np.array([tf])))
    lam_tf = tape.constant(solution.costate(np.array([tf])))
    u_tf = tape.constant(solution.control(np.array([tf]))[:, None])
    x_0 = tape.constant(solution.state(np.array([0.0])))
    path_mask = (ts <= tf).astype(float)[:, None]
    regret_mask = path_mask * (np.abs(lams[:, 1:2]) > SWITCH_TOL)
    conditions, boundaries = _condition_graph(
        tape, x, tape.deriv(x, 1), lam, tape.deriv(lam, 1), u,
        x_tf, lam_tf, u_tf, x_0,
        tape.constant(u_star),
        tape.constant(path_mask),
        tape.constant(np.asarray(1.0 / max(path_mask.sum(), 1.0))),
        tape.constant(regret_mask),
        tape.constant(np.asarray(1.0 / max(regret_mask.sum(), 1.0))),
        x_init, x_goal,
    )
    tape.forward()
    return ResidualReport(
        conditions={k: float(v.value) for k, v in conditions.items()},
        boundaries={k: float(v.value) for k, v in boundaries.items()},
    )


def estimate_switch_time(problem: MinTimeProblem, n_grid: int = 2001) -> float | None:
    """First zero crossing of the learned lam2 on [0, t_f] (linear interpolation)."""
    tf = problem.final_time()
    ts = np.linspace(0.0, tf, n_grid)
    lam2 = problem.costate_at(ts)[:, 1]
    signs = np.sign(lam2)
    flips = np.nonzero(signs[:-1] * signs[1:] < 0)[0]
    if flips.size == 0:
        return None
    i = int(flips[0])
    frac = lam2[i] / (lam2[i] - lam2[i + 1])
    return float(ts[i] + frac * (ts[i + 1] - ts[i]))


def evaluate_mintime(problem: MinTimeProblem, eps: float = 0.05,
                     h: float = 1e-3) -> dict:
    """Metrics of a trained transfer against the closed-form benchmarks."""
    tf = problem.final_time()
    rollout = rollout_mintime(
        lambda t: problem.control_at(np.array([t]))[0, 0],
        x0=problem.x_init, eps=eps, t_max=problem.horizon, h=h,
    )
    ts = np.linspace(0.0, tf, 401)
    lams = problem.costate_at(ts)
    lam1_var = float(np.var(lams[:, 0]))
    coeffs = np.polyfit(ts, lams[:, 1], 1)
    fit = np.polyval(coeffs, ts)
    lam2_range = float(lams[:, 1].max() - lams[:, 1].min())
    lam2_fit_rel = float(np.max(np.abs(lams[:, 1] - fit)) / max(lam2_range, 1e-12))
    switch = estimate_switch_time(problem)
    return {
        "t_f": tf,
        "rollout_hit": rollout.hit,
        "rollout_hit_time": rollout.hit_time,
        "rollout_min_dist": rollout.min_dist,
        "switch_time": switch,
        "lam1_variance": lam1_var,
        "lam2_affine_fit_rel": lam2_fit_rel,
        "lam2_slope": float(coeffs[0]),
    }
