"""Scalar hyper-dual algebra, the batched tape, and their agreement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calvnet.autodiff import (DimensionMismatch, HyperDual, NonFiniteValue,
                              Tape, UsageError, eval_with_input_derivs,
                              finite_difference_check)
from calvnet.networks import MlpSpec, ParameterStore, add_mlp, mlp_forward


def fd_derivatives(f, t, h=1e-5):
    """Central finite differences for the first two derivatives of f at t."""
    d1 = (f(t + h) - f(t - h)) / (2 * h)
    d2 = (f(t + h) - 2 * f(t) + f(t - h)) / (h * h)
    return d1, d2


###############################################################################
# HyperDual scalars
###############################################################################

SCALAR_CASES = [
    ("tanh", lambda x: x.tanh(), lambda t: np.tanh(t)),
    ("exp", lambda x: x.exp(), lambda t: np.exp(t)),
    ("square", lambda x: x.square(), lambda t: t * t),
    ("reciprocal-shifted", lambda x: (x + 3.0).reciprocal(), lambda t: 1.0 / (t + 3.0)),
    ("poly", lambda x: x * x * x - 2.0 * x + 1.0, lambda t: t**3 - 2 * t + 1),
    ("product", lambda x: x.tanh() * x.exp(), lambda t: np.tanh(t) * np.exp(t)),
    ("quotient", lambda x: x.exp() / (x.square() + 1.0),
     lambda t: np.exp(t) / (t * t + 1)),
    ("nested", lambda x: (x.square() - x).tanh().square(),
     lambda t: np.tanh(t * t - t) ** 2),
]


@pytest.mark.parametrize("name,hd_fn,plain_fn", SCALAR_CASES)
def test_hyperdual_matches_finite_differences(name, hd_fn, plain_fn):
    for t in (-1.3, -0.4, 0.0, 0.7, 1.6):
        out = hd_fn(HyperDual.seed(t))
        assert out.value == pytest.approx(plain_fn(t), rel=1e-12)
        d1, d2 = fd_derivatives(plain_fn, t)
        assert out.d1 == pytest.approx(d1, rel=1e-6, abs=1e-7)
        assert out.d2 == pytest.approx(d2, rel=1e-4, abs=1e-5)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2),
       st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_hyperdual_product_rule(fv, f1, f2, gv, g1, g2):
    f, g = HyperDual(fv, f1, f2), HyperDual(gv, g1, g2)
    out = f * g
    assert out.value == pytest.approx(fv * gv)
    assert out.d1 == pytest.approx(fv * g1 + f1 * gv)
    assert out.d2 == pytest.approx(fv * g2 + 2 * f1 * g1 + f2 * gv)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_hyperdual_reciprocal_inverts(v, d1, d2):
    x = HyperDual(v, d1, d2)
    if abs(v) < 0.1:
        x = x + np.copysign(1.0, v or 1.0)
    one = x * x.reciprocal()
    assert one.value == pytest.approx(1.0, abs=1e-9)
    assert one.d1 == pytest.approx(0.0, abs=1e-8)
    assert one.d2 == pytest.approx(0.0, abs=1e-7)


def test_hyperdual_seed_and_constant():
    s = HyperDual.seed(2.5)
    assert (s.value, s.d1, s.d2) == (2.5, 1.0, 0.0)
    c = HyperDual.constant(4.0)
    assert (c.value, c.d1, c.d2) == (4.0, 0.0, 0.0)
    mixed = s * 3 + 1.0 - c
    assert (mixed.value, mixed.d1, mixed.d2) == (4.5, 3.0, 0.0)


###############################################################################
# Tape forward channels vs the scalar reference
###############################################################################

TAPE_CASES = [
    ("tanh", lambda tape, t: tape.tanh(t), lambda x: x.tanh()),
    ("exp", lambda tape, t: tape.exp(t), lambda x: x.exp()),
    ("square-shift", lambda tape, t: tape.shift(tape.square(t), -1.0),
     lambda x: x.square() - 1.0),
    ("rational", lambda tape, t: tape.div(tape.exp(t), tape.shift(tape.square(t), 2.0)),
     lambda x: x.exp() / (x.square() + 2.0)),
    ("mix", lambda tape, t: tape.mul(tape.tanh(t), tape.add(t, tape.square(t))),
     lambda x: x.tanh() * (x + x.square())),
]


@pytest.mark.parametrize("name,tape_fn,hd_fn", TAPE_CASES)
def test_tape_channels_match_hyperdual(name, tape_fn, hd_fn):
    ts = np.array([-1.1, -0.3, 0.2, 0.9, 1.4])
    tape = Tape(order=2)
    t = tape.input("t", (ts.size, 1), seed=True)
    out = tape_fn(tape, t)
    tape.set_input("t", ts[:, None])
    tape.forward()
    for i, ti in enumerate(ts):
        ref = hd_fn(HyperDual.seed(ti))
        assert out.value[i, 0] == pytest.approx(ref.value, rel=1e-12)
        assert out.deriv(1)[i, 0] == pytest.approx(ref.d1, rel=1e-12)
        assert out.deriv(2)[i, 0] == pytest.approx(ref.d2, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_op_chains_match_hyperdual(seed):
    """Random compositions agree between the tape and the scalar algebra."""
    rng = np.random.default_rng(seed)
    ops = []
    for _ in range(rng.integers(1, 6)):
        kind = rng.choice(["tanh", "square", "addc", "mulc", "self_add"])
        ops.append((kind, float(rng.uniform(-1.5, 1.5))))
    ts = rng.uniform(-1.2, 1.2, size=4)

    tape = Tape(order=2)
    t = tape.input("t", (4, 1), seed=True)
    var = t
    for kind, c in ops:
        if kind == "tanh":
            var = tape.tanh(var)
        elif kind == "square":
            var = tape.square(var)
        elif kind == "addc":
            var = tape.shift(var, c)
        elif kind == "mulc":
            var = tape.scale(var, c)
        else:
            var = tape.add(var, t)
    tape.set_input("t", ts[:, None])
    tape.forward()

    for i, ti in enumerate(ts):
        ref = HyperDual.seed(ti)
        for kind, c in ops:
            if kind == "tanh":
                ref = ref.tanh()
            elif kind == "square":
                ref = ref.square()
            elif kind == "addc":
                ref = ref + c
            elif kind == "mulc":
                ref = ref * c
            else:
                ref = ref + HyperDual.seed(ti)
        assert var.value[i, 0] == pytest.approx(ref.value, rel=1e-10, abs=1e-12)
        assert var.deriv(1)[i, 0] == pytest.approx(ref.d1, rel=1e-10, abs=1e-12)
        assert var.deriv(2)[i, 0] == pytest.approx(ref.d2, rel=1e-10, abs=1e-12)


###############################################################################
# Structural ops and the derivative-promotion op
###############################################################################


def test_matrix_ops_values():
    tape = Tape(order=0)
    a = tape.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = tape.constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
    prod = tape.matmul(a, b)
    tr = tape.trace(prod)
    tape.forward()
    assert np.array_equal(prod.value, np.array([[2.0, 1.0], [4.0, 3.0]]))
    assert tr.value == pytest.approx(5.0)


def test_batched_matmul_and_transpose():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(5, 2, 3))
    ys = rng.normal(size=(5, 3, 4))
    tape = Tape(order=0)
    x = tape.constant(xs)
    y = tape.constant(ys)
    z = tape.matmul(x, y)
    zt = tape.transpose(z)
    tape.forward()
    assert np.allclose(z.value, xs @ ys)
    assert np.allclose(zt.value, np.swapaxes(xs @ ys, -1, -2))


def test_concat_take_cols_roundtrip():
    rng = np.random.default_rng(1)
    left, right = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    tape = Tape(order=0)
    a, b = tape.constant(left), tape.constant(right)
    joined = tape.concat([a, b])
    back = tape.take_cols(joined, 2, 5)
    tape.forward()
    assert joined.shape == (4, 5)
    assert np.array_equal(back.value, right)


def test_deriv_promotes_taylor_channels():
    """Promoting d1 to a value shifts the remaining channels down by one."""
    ts = np.array([0.3, 1.1, -0.7])
    tape = Tape(order=2)
    t = tape.input("t", (3, 1), seed=True)
    y = tape.mul(tape.square(t), t)  # t^3
    y1 = tape.deriv(y, 1)
    y2 = tape.deriv(y, 2)
    tape.set_input("t", ts[:, None])
    tape.forward()
    assert np.allclose(y1.value[:, 0], 3 * ts**2)
    assert np.allclose(y2.value[:, 0], 6 * ts)
    # channels of the promoted first derivative are the shifted ones
    assert np.allclose(y1.deriv(1)[:, 0], 6 * ts)


def test_deriv_rejects_bad_orders():
    tape = Tape(order=1)
    t = tape.input("t", (2, 1), seed=True)
    with pytest.raises(UsageError):
        tape.deriv(t, 2)
    with pytest.raises(UsageError):
        tape.deriv(t, 3)


def test_input_shape_is_validated():
    tape = Tape(order=0)
    tape.input("t", (3, 1))
    with pytest.raises(DimensionMismatch):
        tape.set_input("t", np.zeros((2, 1)))


def test_matmul_shape_mismatch_raises():
    tape = Tape(order=0)
    a = tape.constant(np.zeros((2, 3)))
    b = tape.constant(np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        tape.matmul(a, b)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_check_finite_flags_overflow():
    tape = Tape(order=0)
    t = tape.input("t", (1, 1))
    big = tape.exp(tape.exp(t))
    tape.set_input("t", np.array([[10.0]]))
    tape.forward()
    with pytest.raises(NonFiniteValue):
        tape.check_finite(big, "blowup")


###############################################################################
# Staged execution
###############################################################################


def test_staged_forward_matches_full_run():
    """Running the graph in two stages equals one full pass."""
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(6, 1))

    def build(tape):
        t = tape.input("t", (6, 1), seed=True)
        mid = tape.tanh(t)
        gate = tape.input("gate", (6, 1))
        out = tape.sum_all(tape.square(tape.mul(mid, gate)))
        return t, mid, gate, out

    tape_a = Tape(order=1)
    t_a, mid_a, gate_a, out_a = build(tape_a)
    tape_a.set_input("t", xs)
    tape_a.forward(0, mid_a.idx)
    gate_vals = (mid_a.value > 0).astype(float)
    tape_a.set_input("gate", gate_vals)
    tape_a.forward(mid_a.idx + 1)

    tape_b = Tape(order=1)
    t_b, mid_b, gate_b, out_b = build(tape_b)
    tape_b.set_input("t", xs)
    tape_b.set_input("gate", gate_vals)
    tape_b.forward()

    assert out_a.value == pytest.approx(out_b.value, rel=1e-15)


def test_backward_requires_completed_forward():
    store = ParameterStore()
    store.add("w", np.ones((1, 1)))
    store = store.freeze()
    tape = Tape(order=0)
    w = tape.param(store, "w")
    loss = tape.sum_all(tape.square(w))
    with pytest.raises(UsageError):
        tape.backward(loss)
    tape.forward()
    grad = tape.backward(loss)
    assert grad == pytest.approx([2.0])


def test_backward_rejects_nonscalar_loss():
    store = ParameterStore()
    store.add("w", np.ones((2, 2)))
    store = store.freeze()
    tape = Tape(order=0)
    w = tape.param(store, "w")
    y = tape.square(w)
    tape.forward()
    with pytest.raises(UsageError):
        tape.backward(y)


###############################################################################
# Gradients
###############################################################################


def test_linear_regression_gradient_closed_form():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(8, 3))
    w0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(2,))
    targets = rng.normal(size=(8, 2))

    store = ParameterStore()
    store.add("W", w0.copy())
    store.add("b", b0.copy())
    store = store.freeze()

    tape = Tape(order=0)
    x = tape.input("x", (8, 3))
    w = tape.param(store, "W")
    b = tape.param(store, "b")
    pred = tape.linear(x, w, b)
    err = tape.sub(pred, tape.constant(targets))
    loss = tape.sum_all(tape.square(err))
    tape.set_input("x", xs)
    tape.forward()
    grad = tape.backward(loss)

    resid = xs @ w0.T + b0 - targets
    grad_w = 2.0 * resid.T @ xs
    grad_b = 2.0 * resid.sum(axis=0)
    assert np.allclose(grad[store.offset("W"):store.offset("W") + 6],
                       grad_w.ravel(), rtol=1e-12)
    assert np.allclose(grad[store.offset("b"):store.offset("b") + 2],
                       grad_b.ravel(), rtol=1e-12)


def test_backward_is_bit_reproducible():
    rng = np.random.default_rng(4)
    spec = MlpSpec(1, 3, (8, 8))
    store = ParameterStore()
    add_mlp(store, "n/", spec, rng)
    store = store.freeze()
    tape = Tape(order=1)
    t = tape.input("t", (16, 1), seed=True)
    y = mlp_forward(tape, store, "n/", spec, t)
    loss = tape.sum_all(tape.square(tape.add(y, tape.deriv(y, 1))))
    tape.set_input("t", rng.uniform(-1, 1, size=(16, 1)))
    tape.forward()
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    assert np.array_equal(g1, g2)


def test_gradient_through_derivative_channels_matches_fd():
    """Losses that read d1/d2 channels still get correct parameter gradients."""
    spec = MlpSpec(1, 2, (6, 6))
    store = ParameterStore()
    add_mlp(store, "n/", spec, np.random.default_rng(5))
    store = store.freeze()
    ts = np.random.default_rng(6).uniform(-1, 1, size=(10, 1))

    def lossfn(values):
        store.load_values(values)
        tape = Tape(order=2)
        t = tape.input("t", (10, 1), seed=True)
        y = mlp_forward(tape, store, "n/", spec, t)
        combo = tape.add(tape.deriv(y, 2), tape.mul(y, tape.deriv(y, 1)))
        loss = tape.sum_all(tape.square(combo))
        tape.set_input("t", ts)
        tape.forward()
        return float(loss.value), tape.backward(loss)

    err = finite_difference_check(lossfn, store.clone_values(), step=1e-6)
    assert err < 1e-4


def test_eval_with_input_derivs_zero_fills_high_channels():
    spec = MlpSpec(1, 2, (4,))
    store = ParameterStore()
    add_mlp(store, "n/", spec, np.random.default_rng(7))
    store = store.freeze()

    def net(tape, t):
        return mlp_forward(tape, store, "n/", spec, t)

    ts = np.array([0.1, 0.5])
    v0, d1_0, d2_0 = eval_with_input_derivs(net, ts, order=0)
    v1, d1_1, d2_1 = eval_with_input_derivs(net, ts, order=1)
    v2, d1_2, d2_2 = eval_with_input_derivs(net, ts, order=2)
    assert np.array_equal(v0, v1) and np.array_equal(v1, v2)
    assert np.array_equal(d1_0, np.zeros_like(v0))
    assert np.array_equal(d2_1, np.zeros_like(v1))
    assert np.array_equal(d1_1, d1_2)
    h = 1e-5
    vp, _, _ = eval_with_input_derivs(net, ts + h, order=0)
    vm, _, _ = eval_with_input_derivs(net, ts - h, order=0)
    assert np.allclose(d1_2, (vp - vm) / (2 * h), atol=1e-6)
