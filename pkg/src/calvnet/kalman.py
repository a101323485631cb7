"""Optimal state estimation as a variational problem over the gain.

The filter covariance obeys

    sigma_dot = (A - G C) sigma + sigma (A - G C)^T + B Q B^T + G R G^T

and the gain G(t) is chosen to minimise the terminal trace of the
covariance.  The first-order optimality system couples the covariance, a
symmetric matrix costate lam with lam(T) = I, and the stationarity condition
of the trace Hamiltonian in the gain, whose closed form is
``2 lam (G R - sigma C^T)``.  Three estimators are trained jointly: a psd-head
network for the covariance, a symmetrised network for the costate, and a gain
network that reads the *flattened covariance estimate* (not time), so the
learned gain is a reusable map from covariance to gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .networks import MlpSpec, ParameterStore, add_mlp, mlp_forward, mlp_value
from .oracles import riccati_solve, rollout_kalman
from .training import ResidualReport, weighted_total

__all__ = [
    "KalmanSystem",
    "sigma_rhs",
    "costate_rhs",
    "hamiltonian",
    "hamiltonian_grad_gain",
    "KalmanProblem",
    "BaselineKalmanProblem",
    "kalman_replay_report",
    "evaluate_kalman",
    "default_system",
]


@dataclass(frozen=True)
class KalmanSystem:
    """Linear time-invariant system and the covariance problem's data.

    Shapes: A is n-by-n, B n-by-p, C m-by-n, Q p-by-p, R m-by-m, sigma0
    n-by-n.  Q, R and sigma0 must be symmetric positive semidefinite and R
    invertible (its inverse appears in the optimal gain).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    sigma0: np.ndarray
    T: float

    def __post_init__(self):
        for name in ("A", "B", "C", "Q", "R", "sigma0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {self.B.shape}")
        if self.C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {self.C.shape}")
        m, p = self.C.shape[0], self.B.shape[1]
        if self.Q.shape != (p, p):
            raise ValueError(f"Q must be {p}x{p}, got {self.Q.shape}")
        if self.R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {self.R.shape}")
        if self.sigma0.shape != (n, n):
            raise ValueError(f"sigma0 must be {n}x{n}, got {self.sigma0.shape}")
        for name in ("Q", "R", "sigma0"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if abs(np.linalg.det(self.R)) < 1e-12:
            raise ValueError("R must be invertible")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]


def default_system() -> KalmanSystem:
    """Double-integrator chain observed in full, the reference experiment."""
    a = np.zeros((4, 4))
    a[0, 2] = a[1, 3] = 1.0
    b = np.vstack([np.zeros((2, 2)), np.eye(2)])
    return KalmanSystem(
        A=a, B=b, C=np.eye(4), Q=np.eye(2), R=np.eye(4), sigma0=np.eye(4), T=5.0
    )


###############################################################################
# Residual formulas (plain numpy, vectorized over leading axes)
###############################################################################


def sigma_rhs(system: KalmanSystem, sigma: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Covariance dynamics under an arbitrary gain."""
    m = system.A - gain @ system.C
    bqb = system.B @ system.Q @ system.B.T
    return m @ sigma + sigma @ np.swapaxes(m, -1, -2) + bqb + gain @ system.R @ np.swapaxes(gain, -1, -2)


def costate_rhs(system: KalmanSystem, lam: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Costate dynamics ``-lam (A - G C) - (A - G C)^T lam``."""
    m = system.A - gain @ system.C
    return -lam @ m - np.swapaxes(m, -1, -2) @ lam


def hamiltonian(system: KalmanSystem, sigma, lam, gain) -> np.ndarray:
    """Trace Hamiltonian ``tr(lam^T sigma_rhs)``."""
    return np.trace(
        np.swapaxes(lam, -1, -2) @ sigma_rhs(system, sigma, gain),
        axis1=-2, axis2=-1,
    )


def hamiltonian_grad_gain(system: KalmanSystem, sigma, lam, gain) -> np.ndarray:
    """Closed-form gain gradient ``2 lam (G R - sigma C^T)`` (symmetric lam).

    This equals the derivative of :func:`hamiltonian` in the gain whenever
    ``lam`` and ``sigma`` are symmetric, which the estimator heads guarantee;
    the autodiff route is kept alongside for cross-checking.
    """
    return 2.0 * (lam @ (gain @ system.R - sigma @ system.C.T))


###############################################################################
# Tape graph
###############################################################################


def _condition_graph(tape: Tape, system: KalmanSystem, n_points: int,
                     sig: Var, sig_dot: Var, lam: Var, lam_dot: Var, gain: Var,
                     sig_at_0: Var, lam_at_T: Var):
    """Record the optimality residual norms; shared by training and replay."""
    a = tape.constant(system.A)
    c = tape.constant(system.C)
    ct = tape.constant(system.C.T)
    r = tape.constant(system.R)
    bqb = tape.constant(system.B @ system.Q @ system.B.T)
    m = tape.sub(a, tape.matmul(gain, c))
    mt = tape.transpose(m)
    rhs = tape.add(
        tape.add(tape.matmul(m, sig), tape.matmul(sig, mt)),
        tape.add(bqb, tape.matmul(tape.matmul(gain, r), tape.transpose(gain))),
    )
    psi1 = tape.sub(sig_dot, rhs)
    psi2 = tape.add(lam_dot, tape.add(tape.matmul(lam, m), tape.matmul(mt, lam)))
    psi3 = tape.scale(
        tape.matmul(lam, tape.sub(tape.matmul(gain, r), tape.matmul(sig, ct))), 2.0
    )
    psi4 = tape.sub(lam_at_T, tape.constant(np.eye(system.n)[None]))
    bnd = tape.sub(sig_at_0, tape.constant(system.sigma0[None]))
    inv_n = 1.0 / n_points
    conditions = {
        "psi1_covariance_dynamics": tape.scale(tape.sum_all(tape.square(psi1)), inv_n),
        "psi2_costate_dynamics": tape.scale(tape.sum_all(tape.square(psi2)), inv_n),
        "psi3_gain_stationarity": tape.scale(tape.sum_all(tape.square(psi3)), inv_n),
        "psi4_terminal_costate": tape.sum_all(tape.square(psi4)),
    }
    boundaries = {"sigma_initial": tape.sum_all(tape.square(bnd))}
    return conditions, boundaries


def _symmetrize(tape: Tape, mat: Var) -> Var:
    return tape.scale(tape.add(mat, tape.transpose(mat)), 0.5)


class KalmanProblem:
    """Trainable estimation problem: covariance, costate and gain networks."""

    def __init__(self, system: KalmanSystem, n_points: int = 5000,
                 seed: int = 0, hidden: tuple = (64, 64, 64, 64, 64)):
        self.system = system
        self.n_points = n_points
        self.horizon = system.T
        n, m = system.n, system.m
        self.sig_spec = MlpSpec(1, n * n, hidden, head="psd")
        self.lam_spec = MlpSpec(1, n * n, hidden, head="linear")
        self.gain_spec = MlpSpec(n * n, n * m, hidden, head="linear")
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        add_mlp(store, "sig/", self.sig_spec, rng)
        add_mlp(store, "lam/", self.lam_spec, rng)
        add_mlp(store, "gain/", self.gain_spec, rng)
        self.store = store.freeze()
        self._build_tape()

    def _heads(self, tape: Tape, t: Var, count: int):
        n, m = self.system.n, self.system.m
        sig = mlp_forward(tape, self.store, "sig/", self.sig_spec, t)
        lam_raw = mlp_forward(tape, self.store, "lam/", self.lam_spec, t)
        lam = _symmetrize(tape, tape.reshape(lam_raw, (count, n, n)))
        gain_in = tape.reshape(sig, (count, n * n))
        gain_raw = mlp_forward(tape, self.store, "gain/", self.gain_spec, gain_in)
        gain = tape.reshape(gain_raw, (count, n, m))
        return sig, lam, gain

    def _build_tape(self):
        n = self.n_points
        tape = Tape(order=1)
        t = tape.input("t", (n, 1), seed=True)
        sig, lam, gain = self._heads(tape, t, n)
        sig_dot = tape.deriv(sig, 1)
        lam_dot = tape.deriv(lam, 1)
        t0 = tape.constant(np.zeros((1, 1)))
        sig0 = mlp_forward(tape, self.store, "sig/", self.sig_spec, t0)
        t_end = tape.constant(np.full((1, 1), self.system.T))
        lam_end_raw = mlp_forward(tape, self.store, "lam/", self.lam_spec, t_end)
        lam_end = _symmetrize(
            tape, tape.reshape(lam_end_raw, (1, self.system.n, self.system.n))
        )
        self.conditions, self.boundaries = _condition_graph(
            tape, self.system, n, sig, sig_dot, lam, lam_dot, gain, sig0, lam_end
        )
        self.total_loss = weighted_total(tape, self.conditions, self.boundaries)
        self.tape = tape

    # -- training protocol -------------------------------------------------

    def prepare_epoch(self, rng: np.random.Generator, n_points: int) -> None:
        if n_points != self.n_points:
            raise ValueError(
                f"problem was built for {self.n_points} points per epoch, got {n_points}"
            )
        ts = rng.uniform(0.0, self.system.T, size=(n_points, 1))
        self.tape.set_input("t", ts)
        self.tape.forward()

    def report(self) -> ResidualReport:
        return ResidualReport(
            conditions={k: float(v.value) for k, v in self.conditions.items()},
            boundaries={k: float(v.value) for k, v in self.boundaries.items()},
        )

    def scalar_values(self) -> dict:
        return {}

    def post_step(self) -> None:
        pass

    # -- evaluation ----------------------------------------------------------

    def covariance_at(self, ts: np.ndarray) -> np.ndarray:
        return mlp_value(self.store, "sig/", self.sig_spec, np.atleast_1d(ts)[:, None])

    def costate_at(self, ts: np.ndarray) -> np.ndarray:
        n = self.system.n
        raw = mlp_value(self.store, "lam/", self.lam_spec, np.atleast_1d(ts)[:, None])
        mat = raw.reshape(-1, n, n)
        return 0.5 * (mat + np.swapaxes(mat, -1, -2))

    def gain_of_sigma(self, sigma: np.ndarray) -> np.ndarray:
        n, m = self.system.n, self.system.m
        flat = np.asarray(sigma, dtype=float).reshape(-1, n * n)
        return mlp_value(self.store, "gain/", self.gain_spec, flat).reshape(-1, n, m)

    def gain_fn(self, sigma: np.ndarray) -> np.ndarray:
        return self.gain_of_sigma(sigma)[0]

    def checkpoint_meta(self) -> dict:
        return {
            "problem": "kalman",
            "n": self.system.n,
            "m": self.system.m,
            "hidden": list(self.sig_spec.hidden),
        }


class BaselineKalmanProblem(KalmanProblem):
    """Direct-cost contrast: dynamics residual plus terminal trace, no costate.

    Keeps the same covariance and gain networks but replaces the optimality
    conditions with the cost itself, i.e. it trains
    ``|psi1|^2 + |sigma(0) - sigma0|^2 + tr sigma(T)``.  Used to demonstrate
    what the costate conditions buy.
    """

    def _build_tape(self):
        n_pts = self.n_points
        tape = Tape(order=1)
        t = tape.input("t", (n_pts, 1), seed=True)
        sig, _lam, gain = self._heads(tape, t, n_pts)
        sig_dot = tape.deriv(sig, 1)
        a = tape.constant(self.system.A)
        c = tape.constant(self.system.C)
        r = tape.constant(self.system.R)
        bqb = tape.constant(self.system.B @ self.system.Q @ self.system.B.T)
        m = tape.sub(a, tape.matmul(gain, c))
        rhs = tape.add(
            tape.add(tape.matmul(m, sig), tape.matmul(sig, tape.transpose(m))),
            tape.add(bqb, tape.matmul(tape.matmul(gain, r), tape.transpose(gain))),
        )
        psi1 = tape.sub(sig_dot, rhs)
        t0 = tape.constant(np.zeros((1, 1)))
        sig0 = mlp_forward(tape, self.store, "sig/", self.sig_spec, t0)
        t_end = tape.constant(np.full((1, 1), self.system.T))
        sig_end = mlp_forward(tape, self.store, "sig/", self.sig_spec, t_end)
        bnd = tape.sub(sig0, tape.constant(self.system.sigma0[None]))
        self.conditions = {
            "psi1_covariance_dynamics": tape.scale(
                tape.sum_all(tape.square(psi1)), 1.0 / n_pts
            ),
            "terminal_trace": tape.sum_all(tape.trace(sig_end)),
        }
        self.boundaries = {"sigma_initial": tape.sum_all(tape.square(bnd))}
        self.total_loss = weighted_total(tape, self.conditions, self.boundaries)
        self.tape = tape


###############################################################################
# Replay closure and evaluation
###############################################################################


def kalman_replay_report(system: KalmanSystem, ts: np.ndarray,
                         sigmas: np.ndarray, lams: np.ndarray,
                         gains: np.ndarray) -> ResidualReport:
    """Evaluate the training residuals on externally supplied trajectories.

    Time derivatives are those of the exact flow (the dynamics evaluated at
    the supplied points), which is what a perfect interpolating estimator
    would report.  Running the optimality system's own solution through this
    must drive every norm to numerical zero; that closure is a standing test.
    """
    count = len(ts)
    sig_dots = sigma_rhs(system, sigmas, gains)
    lam_dots = costate_rhs(system, lams, gains)
    tape = Tape(order=1)
    sig = tape.constant(sigmas, d1=sig_dots)
    lam = tape.constant(lams, d1=lam_dots)
    gain = tape.constant(gains)
    sig_at_0 = tape.constant(sigmas[:1])
    lam_at_T = tape.constant(lams[-1:])
    conditions, boundaries = _condition_graph(
        tape, system, count,
        sig, tape.deriv(sig, 1), lam, tape.deriv(lam, 1), gain,
        sig_at_0, lam_at_T,
    )
    tape.forward()
    return ResidualReport(
        conditions={k: float(v.value) for k, v in conditions.items()},
        boundaries={k: float(v.value) for k, v in boundaries.items()},
    )


def evaluate_kalman(problem: KalmanProblem, h: float = 1e-3,
                    t_continue: float = 10.0) -> dict:
    """Roll out the learned gain and compare against the Riccati route."""
    system = problem.system
    oracle = riccati_solve(system, h=h)
    rollout, diverged = rollout_kalman(system, problem.gain_fn, t_end=system.T, h=h)
    trace_learned = float(np.trace(rollout.ys[-1]))
    trace_oracle = float(np.trace(oracle.sigmas[-1]))
    gain_at_inf = problem.gain_fn(oracle.sigma_inf)
    gain_err = float(
        np.linalg.norm(gain_at_inf - oracle.gain_inf) / np.linalg.norm(oracle.gain_inf)
    )
    cont, cont_diverged = rollout_kalman(
        system, problem.gain_fn, t_end=t_continue, h=h
    )
    cont_traces = np.trace(cont.ys, axis1=-2, axis2=-1)
    return {
        "trace_T_learned": trace_learned,
        "trace_T_oracle": trace_oracle,
        "trace_T_rel_error": abs(trace_learned - trace_oracle) / abs(trace_oracle),
        "steady_gain_rel_error": gain_err,
        "rollout_diverged": bool(diverged),
        "continuation_diverged": bool(cont_diverged),
        "continuation_max_trace": float(np.max(cont_traces)),
        "oracle_steady_trace": float(np.trace(oracle.sigma_inf)),
        "are_residual": oracle.are_residual,
    }
