"""Geodesic problems: surfaces, functionals, replay closure, warm start."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from calvnet.autodiff import Tape, UsageError
from calvnet.geodesic import (GeodesicProblem, arc_length, energy,
                              evaluate_geodesic, geodesic_replay_report,
                              hypar_instance, sphere_instance,
                              sphere_reference_length, surface_project,
                              train_geodesic)
from calvnet.training import TrainConfig


###############################################################################
# Surface instances
###############################################################################


def test_sphere_instance_pointwise_values():
    spec = sphere_instance()
    assert spec.name == "sphere"
    assert np.allclose(spec.p0, [np.sin(1.0), 0.0, np.cos(1.0)])
    assert spec.f(np.array([[0.0, 0.0, 1.0]]))[0] == pytest.approx(0.0)
    assert spec.phi(np.array([[1.0, 0.0, 0.0]]))[0] == pytest.approx(0.0)
    assert spec.phi(np.array([[0.0, 0.0, 1.0]]))[0] == pytest.approx(1.0)
    pts = np.array([[0.5, -0.25, 2.0]])
    assert np.allclose(spec.grad_f(pts), 2.0 * pts)


def test_hypar_instance_pointwise_values():
    spec = hypar_instance()
    assert spec.name == "hypar"
    pts = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    assert np.allclose(spec.f(pts), [0.0, 0.0, -1.0])
    assert np.allclose(spec.grad_f(pts[:1]), [[-2.0, 2.0, 1.0]])
    # endpoint pin: phi is the squared distance to p1
    assert spec.phi(np.array([[-1.0, 1.0, 0.0]]))[0] == pytest.approx(0.0)
    assert spec.phi(np.array([[1.0, 1.0, 0.0]]))[0] == pytest.approx(4.0)


def test_off_surface_endpoints_are_rejected():
    with pytest.raises(UsageError, match="not on sphere"):
        sphere_instance(p0=(1.0, 0.0, 1.0))
    with pytest.raises(UsageError, match="not on hypar"):
        hypar_instance(p0=(1.0, 0.0, 0.0))
    with pytest.raises(UsageError, match="not on hypar"):
        hypar_instance(p1=(1.0, 0.0, 0.0))


@pytest.mark.parametrize("make_spec", [sphere_instance, hypar_instance])
def test_expression_builders_match_numpy_forms(make_spec):
    spec = make_spec()
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(9, 3))
    tape = Tape(order=0)
    x = tape.constant(pts)
    exprs = {
        "f": spec.f_expr(tape, x),
        "grad_f": spec.grad_f_expr(tape, x),
        "phi": spec.phi_expr(tape, x),
        "grad_phi": spec.grad_phi_expr(tape, x),
    }
    tape.forward()
    assert np.allclose(exprs["f"].value[:, 0], spec.f(pts), atol=1e-13)
    assert np.allclose(exprs["grad_f"].value, spec.grad_f(pts), atol=1e-13)
    assert np.allclose(exprs["phi"].value[:, 0], spec.phi(pts), atol=1e-13)
    assert np.allclose(exprs["grad_phi"].value, spec.grad_phi(pts), atol=1e-13)


def test_stop_project_lands_on_the_stopping_set():
    hypar = hypar_instance()
    assert np.allclose(hypar.stop_project(np.array([5.0, 5.0, 5.0])),
                       [-1.0, 1.0, 0.0])
    sphere = sphere_instance()
    landed = sphere.stop_project(np.asarray(sphere.p0))
    assert abs(sphere.phi(landed[None])[0]) < 1e-10


def test_surface_project_pulls_points_onto_f_zero():
    spec = hypar_instance()
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 3)) * 1.5
    proj = surface_project(spec, pts)
    assert np.max(np.abs(spec.f(proj))) < 1e-12
    # on-surface points stay put
    again = surface_project(spec, proj)
    assert np.allclose(again, proj, atol=1e-12)


###############################################################################
# Energy and length functionals
###############################################################################


def quarter_meridian(ts):
    """North pole to equator at constant speed pi/2, with derivatives."""
    ts = np.asarray(ts, dtype=float)
    w = np.pi / 2.0
    g = np.stack([np.sin(w * ts), np.zeros_like(ts), np.cos(w * ts)], axis=-1)
    gd = w * np.stack([np.cos(w * ts), np.zeros_like(ts), -np.sin(w * ts)], axis=-1)
    gdd = -(w ** 2) * g
    return g, gd, gdd


def test_energy_and_length_on_reference_curves():
    ts = np.linspace(0.0, 1.0, 1001)
    zero = np.zeros((ts.size, 3))
    assert energy(ts, zero) == 0.0
    line = np.tile([1.0, 0.0, 0.0], (ts.size, 1))
    assert energy(ts, line, method="trapezoid") == pytest.approx(1.0)
    assert arc_length(ts, line, method="monte-carlo") == pytest.approx(1.0)
    _, gd, _ = quarter_meridian(ts)
    assert energy(ts, gd, method="trapezoid") == pytest.approx((np.pi / 2) ** 2,
                                                               rel=1e-9)
    assert arc_length(ts, gd, method="trapezoid") == pytest.approx(np.pi / 2,
                                                                   rel=1e-9)


def test_arc_length_is_reparameterization_invariant():
    ts = np.linspace(0.0, 1.0, 2001)
    # run the meridian on the warped clock s = t^2: same path, varying speed
    _, gd_warp, _ = quarter_meridian(ts ** 2)
    gd_warp = gd_warp * (2.0 * ts)[:, None]
    length = arc_length(ts, gd_warp, method="trapezoid")
    assert length == pytest.approx(np.pi / 2, rel=1e-4)
    # while the energy moves away from its constant-speed minimum
    assert energy(ts, gd_warp, method="trapezoid") > (np.pi / 2) ** 2 + 0.1


def test_unknown_quadrature_method_raises():
    with pytest.raises(ValueError, match="quadrature"):
        energy(np.array([0.0, 1.0]), np.zeros((2, 3)), method="simpson")
    with pytest.raises(ValueError, match="quadrature"):
        arc_length(np.array([0.0, 1.0]), np.zeros((2, 3)), method="simpson")


@given(hnp.arrays(np.float64, (32, 3),
                  elements=st.floats(min_value=-5.0, max_value=5.0)))
@settings(max_examples=40, deadline=None)
def test_length_squared_never_exceeds_energy(gd):
    ts = np.linspace(0.0, 1.0, 32)
    length = arc_length(ts, gd, method="monte-carlo")
    assert length ** 2 <= energy(ts, gd, method="monte-carlo") + 1e-12


def test_sphere_reference_length_examples():
    assert sphere_reference_length((np.sin(1.0), 0.0, np.cos(1.0))) == \
        pytest.approx(np.pi / 2 - 1.0)
    assert sphere_reference_length((1.0, 0.0, 0.0)) == pytest.approx(0.0)
    assert sphere_reference_length((0.0, 0.0, 1.0)) == pytest.approx(np.pi / 2)


###############################################################################
# Replay closure on analytic meridians
###############################################################################


def test_replay_closes_on_the_polar_meridian():
    spec = sphere_instance(p0=(0.0, 0.0, 1.0))
    w = np.pi / 2.0
    report = geodesic_replay_report(
        spec, quarter_meridian, lambda ts: -(w ** 2) / 2.0 * np.ones(np.size(ts)),
        lam_f=-w, ts=np.linspace(0.0, 1.0, 101),
    )
    for name, value in report.all_entries().items():
        assert value < 1e-12, f"{name} did not close: {value}"


def test_replay_closes_on_the_default_start_meridian():
    spec = sphere_instance()
    w = np.pi / 2.0 - 1.0

    def curve(ts):
        ts = np.asarray(ts, dtype=float)
        ang = 1.0 + w * ts
        g = np.stack([np.sin(ang), np.zeros_like(ts), np.cos(ang)], axis=-1)
        gd = w * np.stack([np.cos(ang), np.zeros_like(ts), -np.sin(ang)], axis=-1)
        return g, gd, -(w ** 2) * g

    report = geodesic_replay_report(
        spec, curve, lambda ts: -(w ** 2) / 2.0 * np.ones(np.size(ts)),
        lam_f=-w, ts=np.linspace(0.0, 1.0, 101),
    )
    assert sum(report.all_entries().values()) < 1e-12


def test_replay_flags_off_geodesic_multiplier():
    spec = sphere_instance(p0=(0.0, 0.0, 1.0))
    report = geodesic_replay_report(
        spec, quarter_meridian, lambda ts: np.zeros(np.size(ts)),
        lam_f=-np.pi / 2.0, ts=np.linspace(0.0, 1.0, 101),
    )
    assert report.conditions["psi2_geodesic"] > 1.0
    assert report.conditions["psi1_surface"] < 1e-12


def test_replay_closes_on_the_hypar_ruling():
    """The straight ruling y = x, z = 0 is a geodesic with zero multiplier."""
    spec = hypar_instance(p0=(0.0, 0.0, 0.0), p1=(1.0, 1.0, 0.0))

    def ruling(ts):
        ts = np.asarray(ts, dtype=float)
        g = np.stack([ts, ts, np.zeros_like(ts)], axis=-1)
        gd = np.tile([1.0, 1.0, 0.0], (ts.size, 1))
        return g, gd, np.zeros_like(g)

    report = geodesic_replay_report(
        spec, ruling, lambda ts: np.zeros(np.size(ts)), lam_f=0.0,
        ts=np.linspace(0.0, 1.0, 101),
    )
    assert set(report.conditions) == {"psi1_surface", "psi2_geodesic"}
    assert set(report.boundaries) == {"initial_point", "terminal_point"}
    for name, value in report.all_entries().items():
        assert value < 1e-24, f"{name} did not close: {value}"


###############################################################################
# Trainable problem wiring
###############################################################################


def tiny_problem(spec=None, seed=0):
    return GeodesicProblem(spec or sphere_instance(), n_points=32, seed=seed,
                           hidden=(12, 12))


def test_residual_names_cover_the_condition_system():
    problem = tiny_problem()
    assert set(problem.conditions) == {"psi1_surface", "psi2_geodesic",
                                       "psi3_transversality", "stopping_set"}
    assert set(problem.boundaries) == {"initial_point"}


def test_pinned_endpoint_swaps_transversality_for_a_point_condition():
    problem = tiny_problem(hypar_instance())
    assert set(problem.conditions) == {"psi1_surface", "psi2_geodesic"}
    assert set(problem.boundaries) == {"initial_point", "terminal_point"}


def test_problem_rejects_mismatched_batch():
    problem = tiny_problem()
    with pytest.raises(ValueError, match="32 points"):
        problem.prepare_epoch(np.random.default_rng(0), 64)


def test_curve_derivatives_shapes_and_consistency():
    problem = tiny_problem()
    ts = np.linspace(0.0, 1.0, 6)
    g, gd, gdd = problem.curve_derivatives(ts, order=2)
    assert g.shape == gd.shape == gdd.shape == (6, 3)
    assert np.allclose(g, problem.curve_at(ts))
    g1, gd1 = problem.curve_derivatives(ts, order=1)
    assert np.allclose(g1, g) and np.allclose(gd1, gd)
    h = 1e-6
    g_plus = problem.curve_at(ts + h)
    g_minus = problem.curve_at(ts - h)
    assert np.allclose((g_plus - g_minus) / (2 * h), gd, atol=1e-6)


def test_alpha_weights_condition_terms_only():
    problem = tiny_problem()
    problem.tape.set_input("alpha", np.asarray(1.0))
    problem.prepare_epoch(np.random.default_rng(2), problem.n_points)
    report = problem.report()
    problem.tape.set_input("alpha", np.asarray(3.0))
    problem.tape.forward()
    expect = report.boundary_total() + 3.0 * report.condition_total()
    assert float(problem.total_loss.value) == pytest.approx(expect, rel=1e-12)


def test_checkpoint_meta_names_the_surface():
    assert tiny_problem().checkpoint_meta()["problem"] == "geodesic-sphere"
    assert tiny_problem(hypar_instance()).checkpoint_meta()["problem"] == \
        "geodesic-hypar"


def test_terminal_multiplier_starts_at_zero():
    assert tiny_problem().terminal_multiplier() == 0.0


###############################################################################
# Training recipe
###############################################################################


def test_warm_start_pins_fixed_endpoints_before_training():
    problem = GeodesicProblem(hypar_instance(), n_points=32, seed=3,
                              hidden=(24, 24))
    # one epoch: the state right after the chord fit (a fresh net would sit
    # near the origin, about 1.4 away from either endpoint)
    cfg = TrainConfig(epochs=1, points_per_epoch=32, seed=3,
                      pretrain_steps=8000, pretrain_tol=2e-4)
    result = train_geodesic(problem, cfg, log_every=0)
    assert np.isfinite(result.final_loss)
    g = problem.curve_at(np.linspace(0.0, 1.0, 64))
    assert np.linalg.norm(g[0] - [1.0, 1.0, 0.0]) < 0.1
    assert np.linalg.norm(g[-1] - [-1.0, 1.0, 0.0]) < 0.1
    assert np.max(np.abs(hypar_instance().f(g))) < 0.2
    # the fitted curve is near-constant speed by construction
    _, gd = problem.curve_derivatives(np.linspace(0.05, 0.95, 40), order=1)
    speeds = np.linalg.norm(gd, axis=1)
    assert np.std(speeds) / np.mean(speeds) < 0.2


def test_free_boundary_training_runs_without_warm_start():
    problem = tiny_problem(seed=4)
    cfg = TrainConfig(epochs=5, points_per_epoch=32, seed=4)
    result = train_geodesic(problem, cfg, log_every=0)
    assert np.isfinite(result.final_loss)


###############################################################################
# Evaluation metrics
###############################################################################


def test_evaluate_reports_the_metric_suite():
    metrics = evaluate_geodesic(tiny_problem(seed=5))
    expected = {"length", "energy", "length_sq_minus_energy", "speed_cv",
                "max_f", "transversality_angle_deg",
                "acceleration_tangency_defect", "endpoint_phi", "lam_f",
                "reference_length", "length_rel_error"}
    assert set(metrics) == expected
    assert metrics["reference_length"] == pytest.approx(np.pi / 2 - 1.0)
    assert metrics["length_sq_minus_energy"] <= 1e-9


def test_evaluate_hypar_adds_endpoint_distance_with_explicit_reference():
    metrics = evaluate_geodesic(tiny_problem(hypar_instance(), seed=6),
                                reference_length=2.0)
    assert "endpoint_distance" in metrics
    assert metrics["reference_length"] == 2.0
