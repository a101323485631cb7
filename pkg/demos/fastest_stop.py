"""Minimum-time parking of a double integrator, learned and checked.

A cart starts at position 1 with zero velocity and must reach the origin in
the least possible time with acceleration bounded by |u| <= 1.  The classical
answer is bang-bang: full brake, one switch, full reverse, t_f = 2 with the
switch at t = 1.  Here the whole structure (state, costate, control, final
time) is learned by making the stationarity residuals vanish, and the
closed-form arcs are only used to grade the result at the end.

    python3 demos/fastest_stop.py [--epochs N] [--seed S]
"""

import argparse
import time

import numpy as np

from calvnet.mintime import MinTimeProblem, evaluate_mintime, train_mintime
from calvnet.oracles import bangbang_analytic
from calvnet.training import TrainConfig


def ascii_plot(ts, ys, height=9, label=""):
    """Monochrome terminal sketch of one curve."""
    lo, hi = float(np.min(ys)), float(np.max(ys))
    span = (hi - lo) or 1.0
    cols = len(ts)
    grid = [[" "] * cols for _ in range(height)]
    for j, y in enumerate(ys):
        i = int(round((hi - y) / span * (height - 1)))
        grid[i][j] = "*"
    print(f"  {label}  [{lo:+.2f}, {hi:+.2f}]")
    for row in grid:
        print("   |" + "".join(row))
    print("   +" + "-" * cols)
    print(f"    t = 0 ... {ts[-1]:.2f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=10000,
                        help="outer epochs (40000 reproduces the calibrated run)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    print("Classical benchmark (closed form):")
    solution = bangbang_analytic((1.0, 0.0))
    print(f"  t_f = {solution.t_f:.4f}, switch at t = {solution.t_switch:.4f}, "
          f"first arc u = {solution.a:+.0f}")

    print(f"\nTraining (alternating schedule, {args.epochs} epochs)...")
    problem = MinTimeProblem(n_points=512, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, points_per_epoch=512, seed=args.seed)
    started = time.time()

    def progress(epoch, loss, alpha):
        if epoch == 1 or epoch % max(1, args.epochs // 8) == 0:
            print(f"  epoch {epoch:>6d}   loss {loss:.6f}   t_f {problem.final_time():.4f}")

    train_mintime(problem, cfg, log_every=0, callback=progress)
    print(f"  done in {time.time() - started:.0f} s")

    metrics = evaluate_mintime(problem)
    print("\nLearned solution:")
    print(f"  t_f                 {metrics['t_f']:.4f}   (target 2.0000)")
    switch = metrics["switch_time"]
    print(f"  switch time         {switch if switch is None else f'{switch:.4f}'}"
          f"   (target 1.0000)")
    print(f"  rollout reaches the goal ball: {bool(metrics['rollout_hit'])}"
          + (f" at t = {metrics['rollout_hit_time']:.4f}" if metrics["rollout_hit"] else
             f" (closest approach {metrics['rollout_min_dist']:.4f})"))
    print(f"  var lam1 = {metrics['lam1_variance']:.2e}  "
          f"(constant along the optimal arc)")
    print(f"  lam2 affine-fit residual = {metrics['lam2_affine_fit_rel']:.2e}  "
          f"(lam2 is a straight line)")

    ts = np.linspace(0.0, metrics["t_f"], 64)
    print()
    ascii_plot(ts, problem.control_at(ts)[:, 0], label="learned control u(t)")
    print()
    ascii_plot(ts, problem.costate_at(ts)[:, 1], label="learned costate lam2(t)")
    print("\nThe control rides the bound and flips sign exactly where lam2")
    print("crosses zero; that zero crossing is the learned switch time.")


if __name__ == "__main__":
    main()
