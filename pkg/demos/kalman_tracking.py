"""Learn the Kalman filter of a double integrator pair from first principles.

The script trains two small networks to satisfy the stationarity conditions
of the filtering variational problem (covariance dynamics, costate dynamics,
gain stationarity, terminal costate) and then confronts the result with the
classical route: integrate the Riccati equation, read off the optimal gain,
and roll the error covariance forward.

Run from the repository root after an editable install:

    python3 demos/kalman_tracking.py              # ~90 s on one core
    python3 demos/kalman_tracking.py --epochs 20000   # calibration budget
"""

import argparse
import time

import numpy as np

from calvnet.kalman import KalmanProblem, default_system, evaluate_kalman
from calvnet.oracles import riccati_solve
from calvnet.training import TrainConfig, train


def banner(text):
    print()
    print(text)
    print("-" * len(text))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=6000,
                        help="training epochs (20000 reproduces the calibrated run)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    system = default_system()
    banner("The estimation problem")
    print("State: two decoupled double integrators (positions and velocities),")
    print("driven by unit process noise; we observe the two positions only.")
    print(f"  A nonzero entries: A[0,1] = A[2,3] = 1   (n = {system.n})")
    print(f"  C rows: positions x1, x3                 (m = {system.m})")
    print(f"  Q = I2, R = I4 scaled as declared, horizon T = {system.T:g} s")

    banner("What the classical solution says")
    oracle = riccati_solve(system)
    print(f"  Riccati tr Sigma(T)      = {oracle.trace_at(system.T):.6f}")
    print(f"  steady-state tr Sigma    = {np.trace(oracle.sigma_inf):.6f}")
    print(f"  algebraic-Riccati residual of the fixed point: {oracle.are_residual:.2e}")
    print(f"  derivative settles below 1e-8 at t = {oracle.settle_time:.2f} s")

    banner(f"Training the residual networks ({args.epochs} epochs)")
    problem = KalmanProblem(system, n_points=512, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, points_per_epoch=512, seed=args.seed)
    started = time.time()

    def progress(epoch, loss, alpha):
        if epoch == 1 or epoch % max(1, args.epochs // 8) == 0:
            print(f"  epoch {epoch:>6d}   loss {loss:.6f}   alpha {alpha:.3f}")

    result = train(problem, cfg, log_every=0, callback=progress)
    print(f"  done in {time.time() - started:.0f} s, final loss {result.final_loss:.6f}")

    banner("Learned filter vs Riccati")
    metrics = evaluate_kalman(problem)
    rows = [
        ("tr Sigma(T) learned", f"{metrics['trace_T_learned']:.6f}"),
        ("tr Sigma(T) oracle", f"{metrics['trace_T_oracle']:.6f}"),
        ("relative error", f"{metrics['trace_T_rel_error']:.4%}"),
        ("steady-gain relative error", f"{metrics['steady_gain_rel_error']:.4%}"),
        ("rollout to t=10 stays bounded", str(not metrics['continuation_diverged'])),
        ("max trace on the continuation", f"{metrics['continuation_max_trace']:.4f}"),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"  {label:<{width}}  {value}")

    print()
    print("The learned gain is a function of the learned covariance, so the")
    print("rollout past the training horizon keeps regulating itself; compare")
    print("the direct-cost baseline in the tests, which falls apart there.")
    if args.epochs < 20000:
        print("(Short demo budget; rerun with --epochs 20000 for the calibrated numbers.)")


if __name__ == "__main__":
    main()
