"""Residual-driven training loop shared by all three variational problems.

One epoch follows the same pattern everywhere: sample collocation times
uniformly over the horizon, evaluate the estimator networks (with input
derivatives) at those times, form the necessary-condition residuals, assemble

    loss = sum(boundary residuals) + alpha * sum(condition norms)

and take one optimizer step on every trainable quantity, including learnable
scalars such as the free final time.  The weight ``alpha`` follows a
multiplicative curriculum.  Problems expose a prepared tape (see the problem
modules); this module owns sampling, the loss schedule, optimizers, logging
and the alternating scheme used for bang-bang control.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .networks import MlpSpec, ParameterStore, mlp_forward

__all__ = [
    "TrainConfig",
    "TrainResult",
    "ResidualReport",
    "TrainingAborted",
    "sample_times",
    "curriculum_step",
    "effective_lr",
    "assemble_loss",
    "weighted_total",
    "make_optimizer",
    "train",
    "alternating_train",
    "fit_network",
    "pretrain_costate",
]


class TrainingAborted(RuntimeError):
    """Training produced a non-finite loss; message names the first bad residual."""


@dataclass
class TrainConfig:
    """Hyperparameters of the residual-minimisation loop.

    Defaults follow the reference setup: plain SGD at learning rate 8e-4,
    5000 collocation points per epoch, and the condition weight multiplied by
    1.04 every 5000 epochs starting from 1.
    """

    epochs: int
    learning_rate: float = 8e-4
    points_per_epoch: int = 5000
    alpha0: float = 1.0
    curriculum_period: int = 5000
    curriculum_factor: float = 1.04
    alpha_cap: float | None = None
    # "initial learning rate" in the reference setup; < 1 anneals it on the
    # curriculum cadence, which drops the sampling-noise floor late in a run
    lr_decay: float = 1.0
    tol: float = 1e-5
    seed: int = 0
    optimizer: str = "sgd"
    # alternating scheme (minimum-time problems)
    alternating_n: int = 5
    alternating_batch: int | None = None
    box_expand: float = 0.2
    # costate pretraining
    pretrain_steps: int = 4000
    pretrain_tol: float = 1e-4


@dataclass
class ResidualReport:
    """Scalar residual norms of one batch, split by loss role.

    ``conditions`` are the alpha-weighted necessary-condition norms (path
    residuals use the batch mean of the squared pointwise norm, point
    residuals the plain squared norm); ``boundaries`` enter with weight one.
    """

    conditions: dict
    boundaries: dict

    def condition_total(self) -> float:
        return float(sum(self.conditions.values()))

    def boundary_total(self) -> float:
        return float(sum(self.boundaries.values()))

    def psi_total(self) -> float:
        return self.condition_total()

    def all_entries(self) -> dict:
        out = dict(self.boundaries)
        out.update(self.conditions)
        return out


def assemble_loss(report: ResidualReport, alpha: float) -> float:
    """Boundary terms plus alpha-weighted condition norms; alpha must be positive."""
    if alpha <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return report.boundary_total() + alpha * report.condition_total()


def weighted_total(tape: Tape, conditions: dict, boundaries: dict):
    """Tape-level counterpart of :func:`assemble_loss`.

    Creates the ``alpha`` input (default 1.0; the loop overwrites it every
    epoch) and returns the scalar loss variable.
    """
    alpha = tape.input("alpha", ())
    tape.set_input("alpha", np.asarray(1.0))
    cond = None
    for var in conditions.values():
        cond = var if cond is None else tape.add(cond, var)
    bnd = None
    for var in boundaries.values():
        bnd = var if bnd is None else tape.add(bnd, var)
    weighted = tape.mul(alpha, cond)
    return weighted if bnd is None else tape.add(bnd, weighted)


def sample_times(n: int, span, rng: np.random.Generator) -> np.ndarray:
    """Uniform i.i.d. collocation times over ``span = (lo, hi)``."""
    lo, hi = float(span[0]), float(span[1])
    if not n > 0:
        raise ValueError(f"need a positive sample count, got {n}")
    if not hi > lo:
        raise ValueError(f"empty time span ({lo}, {hi})")
    return rng.uniform(lo, hi, size=n)


def curriculum_step(alpha: float, epoch: int, cfg: TrainConfig) -> float:
    """Multiply alpha by the curriculum factor at every period boundary."""
    if cfg.curriculum_period > 0 and epoch > 0 and epoch % cfg.curriculum_period == 0:
        alpha = alpha * cfg.curriculum_factor
        if cfg.alpha_cap is not None:
            alpha = min(alpha, cfg.alpha_cap)
    return alpha


def effective_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate at a 1-based epoch: decayed once per curriculum period."""
    if cfg.lr_decay == 1.0 or cfg.curriculum_period <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.lr_decay ** ((epoch - 1) // cfg.curriculum_period)


###############################################################################
# Optimizers
###############################################################################


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParameterStore, grad: np.ndarray, mask=None) -> None:
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        store.apply_update(-self.lr * grad)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, store: ParameterStore, grad: np.ndarray, mask=None) -> None:
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        update = -self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if mask is not None:
            update = np.where(mask, update, 0.0)
        store.apply_update(update)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate)
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


###############################################################################
# Main loop
###############################################################################


@dataclass
class TrainResult:
    final_loss: float
    epochs_run: int
    converged: bool
    alpha: float
    history: list = field(repr=False, default_factory=list)
    wall_seconds: float = 0.0

    def history_rows(self) -> list:
        return self.history


def _abort_diagnostic(problem) -> str:
    report = problem.report()
    for name, value in report.all_entries().items():
        if not np.isfinite(value):
            return f"first non-finite residual: {name}"
    return "loss non-finite but every residual is finite (overflow in the sum)"


def train(problem, cfg: TrainConfig, log_every: int = 1,
          callback=None) -> TrainResult:
    """Run the residual-minimisation loop until convergence or the epoch cap.

    ``problem`` provides the prepared tape (see the problem modules): it must
    expose ``tape``, ``store``, ``total_loss``, ``prepare_epoch(rng, n)``,
    ``report()``, ``scalar_values()`` and ``post_step()``.  Stops early once
    the loss falls below ``cfg.tol``.  With a fixed seed the run is
    bit-reproducible: sampling uses a dedicated generator and gradient
    accumulation order is fixed.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    tape = problem.tape
    alpha = cfg.alpha0
    history: list = []
    loss = float("nan")
    started = time.perf_counter()
    epochs_run = 0
    converged = False
    for epoch in range(1, cfg.epochs + 1):
        tape.set_input("alpha", np.asarray(alpha))
        problem.prepare_epoch(rng, cfg.points_per_epoch)
        loss = float(problem.total_loss.value)
        epochs_run = epoch
        if not np.isfinite(loss):
            raise TrainingAborted(
                f"epoch {epoch}: loss is non-finite; {_abort_diagnostic(problem)}"
            )
        grad = tape.backward(problem.total_loss)
        opt.lr = effective_lr(cfg, epoch)
        opt.step(problem.store, grad)
        problem.post_step()
        if log_every > 0 and (epoch % log_every == 0 or epoch == cfg.epochs):
            row = {"epoch": epoch, "loss": loss, "alpha": alpha}
            row.update(problem.report().all_entries())
            row.update(problem.scalar_values())
            history.append(row)
        if callback is not None:
            callback(epoch, loss, alpha)
        alpha = curriculum_step(alpha, epoch, cfg)
        if loss < cfg.tol:
            converged = True
            break
    return TrainResult(
        final_loss=loss,
        epochs_run=epochs_run,
        converged=converged,
        alpha=alpha,
        history=history,
        wall_seconds=time.perf_counter() - started,
    )


def alternating_train(problem, cfg: TrainConfig, log_every: int = 1,
                      callback=None) -> TrainResult:
    """Two-step schedule for problems whose control is trained pointwise.

    Each outer epoch first freezes the state and costate estimators and takes
    ``cfg.alternating_n`` steps on the control network alone, minimising the
    Hamiltonian on state/costate pairs drawn uniformly from the bounding box
    of the values seen in the latest main batch (expanded by
    ``cfg.box_expand`` on each side).  It then freezes the control and takes
    one step of the usual residual loss on everything else.
    """
    rng = np.random.default_rng(cfg.seed)
    opt_main = make_optimizer(cfg)
    opt_ctrl = make_optimizer(cfg)
    tape = problem.tape
    control_mask = problem.control_mask()
    main_mask = ~control_mask
    n_ctrl = cfg.alternating_batch or cfg.points_per_epoch
    alpha = cfg.alpha0
    history: list = []
    loss = float("nan")
    started = time.perf_counter()
    epochs_run = 0
    converged = False
    box = problem.initial_box(rng, cfg.points_per_epoch)
    for epoch in range(1, cfg.epochs + 1):
        # (a) control-only: minimise the Hamiltonian on random state/costate pairs
        lo, hi = box
        width = hi - lo
        lo_x = lo - cfg.box_expand * width
        hi_x = hi + cfg.box_expand * width
        draws = rng.uniform(lo_x, hi_x, size=(n_ctrl, lo.size))
        problem.set_control_batch(draws)
        opt_ctrl.lr = opt_main.lr = effective_lr(cfg, epoch)
        for _ in range(cfg.alternating_n):
            problem.control_tape.forward()
            cgrad = problem.control_tape.backward(problem.control_loss)
            opt_ctrl.step(problem.store, cgrad, mask=control_mask)
        # (b) everything but the control: one residual step
        tape.set_input("alpha", np.asarray(alpha))
        problem.prepare_epoch(rng, cfg.points_per_epoch)
        box = problem.batch_box()
        loss = float(problem.total_loss.value)
        epochs_run = epoch
        if not np.isfinite(loss):
            raise TrainingAborted(
                f"epoch {epoch}: loss is non-finite; {_abort_diagnostic(problem)}"
            )
        grad = tape.backward(problem.total_loss)
        opt_main.step(problem.store, grad, mask=main_mask)
        problem.post_step()
        if log_every > 0 and (epoch % log_every == 0 or epoch == cfg.epochs):
            row = {"epoch": epoch, "loss": loss, "alpha": alpha}
            row.update(problem.report().all_entries())
            row.update(problem.scalar_values())
            history.append(row)
        if callback is not None:
            callback(epoch, loss, alpha)
        alpha = curriculum_step(alpha, epoch, cfg)
        if loss < cfg.tol:
            converged = True
            break
    return TrainResult(
        final_loss=loss,
        epochs_run=epochs_run,
        converged=converged,
        alpha=alpha,
        history=history,
        wall_seconds=time.perf_counter() - started,
    )


###############################################################################
# Supervised warm-up fits
###############################################################################


def fit_network(store: ParameterStore, prefix: str, spec: MlpSpec,
                xs: np.ndarray, ys: np.ndarray, lr: float = 1e-3,
                tol: float = 1e-4, max_steps: int = 4000) -> float:
    """Fit one network to targets by Adam on the mean squared error.

    Only the slices under ``prefix`` are updated.  Returns the final MSE;
    raises :class:`TrainingAborted` if the tolerance is not reached.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    tape = Tape(order=0)
    xv = tape.input("x", xs.shape)
    tape.set_input("x", xs)
    out = mlp_forward(tape, store, prefix, spec, xv)
    target = tape.input("y", ys.shape)
    tape.set_input("y", ys)
    err = tape.sub(out, target)
    loss_var = tape.scale(tape.sum_all(tape.square(err)), 1.0 / ys.size)
    mask = store.mask(prefix)
    opt = Adam(lr)
    mse = float("inf")
    for _ in range(max_steps):
        tape.forward()
        mse = float(loss_var.value)
        if mse < tol:
            return mse
        grad = tape.backward(loss_var)
        opt.step(store, grad, mask=mask)
    raise TrainingAborted(
        f"warm-up fit for {prefix!r} stalled at mse {mse:.3e} (tol {tol:.1e})"
    )


def pretrain_costate(problem, target_profile, tol: float = 1e-4,
                     max_steps: int = 4000, n_points: int = 256) -> float:
    """Push the costate estimator onto a chosen nonzero profile.

    A costate network that starts near zero kills every Hamiltonian gradient,
    so alternating training would never move the control.  ``target_profile``
    maps an array of times to costate rows (constants are broadcast).
    """
    ts = np.linspace(0.0, problem.horizon, n_points)
    targets = np.asarray(target_profile(ts), dtype=float)
    if targets.ndim == 1:
        targets = np.broadcast_to(targets, (n_points, targets.size)).copy()
    return fit_network(
        problem.store, problem.costate_prefix, problem.costate_spec,
        ts[:, None], targets, tol=tol, max_steps=max_steps,
    )
