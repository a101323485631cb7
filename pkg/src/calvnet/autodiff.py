"""Reverse-over-forward automatic differentiation on batched float64 arrays.

Residual losses in this package need two derivative flavours at once: derivatives
of network outputs with respect to the scalar network *input* (time), which enter
the residuals themselves (x_dot, gamma_ddot), and derivatives of the scalar loss
with respect to every *parameter*, which drive training.  The input derivatives
are carried forward as truncated Taylor coefficients: every quantity is a triple
``(value, d1, d2)`` of arrays, where ``d1``/``d2`` are first and second
derivatives with respect to the seed scalar of that quantity's batch row.  The
parameter gradient is then obtained by a reverse sweep over the recorded graph,
treating all non-``None`` channels as ordinary outputs of each primitive.

The graph is static: it is built once (see :class:`Tape`), and re-executed with
:meth:`Tape.forward` after updating leaf values in place.  Re-execution touches
only numpy kernels, which is what makes long training runs affordable.  Batched
leaves make collocation points data-parallel; BLAS threading (capped by the
``CALVNET_THREADS`` environment variable, see :mod:`calvnet.cli`) is the only
concurrency, and the reverse sweep accumulates in a fixed traversal order, so
gradients are bit-reproducible.

The primitive set is deliberately small: add, sub, mul, div, tanh, exp,
elementwise square, matrix product, transpose, trace, plus the shape plumbing
(reshape, column slice, concat, reductions) needed to assemble residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "HyperDual",
    "Tape",
    "Var",
    "DimensionMismatch",
    "NonFiniteValue",
    "UsageError",
    "eval_with_input_derivs",
    "finite_difference_check",
]


class DimensionMismatch(ValueError):
    """Operands of a primitive do not have compatible shapes."""


class NonFiniteValue(FloatingPointError):
    """A forward evaluation produced NaN or infinity."""


class UsageError(RuntimeError):
    """The tape was driven in an unsupported order (e.g. gradient before forward)."""


###############################################################################
# Scalar hyper-dual numbers
###############################################################################


@dataclass
class HyperDual:
    """Scalar carrying (value, first, second) derivative w.r.t. one seed input.

    This is the reference implementation of the truncated Taylor algebra used
    by the batched tape channels; the two are tested against each other.  The
    convention is plain derivatives, not factorial-scaled coefficients:
    ``(f*g).d2 == f.value*g.d2 + 2*f.d1*g.d1 + f.d2*g.value``.
    """

    value: float
    d1: float = 0.0
    d2: float = 0.0

    @staticmethod
    def seed(t: float) -> "HyperDual":
        """Lift the seed input itself: derivative 1, curvature 0."""
        return HyperDual(float(t), 1.0, 0.0)

    @staticmethod
    def constant(c: float) -> "HyperDual":
        return HyperDual(float(c), 0.0, 0.0)

    def _lift(self, other) -> "HyperDual":
        if isinstance(other, HyperDual):
            return other
        return HyperDual.constant(other)

    def __add__(self, other):
        o = self._lift(other)
        return HyperDual(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __neg__(self):
        return HyperDual(-self.value, -self.d1, -self.d2)

    def __sub__(self, other):
        o = self._lift(other)
        return HyperDual(self.value - o.value, self.d1 - o.d1, self.d2 - o.d2)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        o = self._lift(other)
        return HyperDual(
            self.value * o.value,
            self.value * o.d1 + self.d1 * o.value,
            self.value * o.d2 + 2.0 * self.d1 * o.d1 + self.d2 * o.value,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * self._lift(other).reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def _compose(self, f0: float, f1: float, f2: float) -> "HyperDual":
        # chain rule for a smooth unary f applied to self
        return HyperDual(f0, f1 * self.d1, f2 * self.d1 * self.d1 + f1 * self.d2)

    def reciprocal(self) -> "HyperDual":
        v = 1.0 / self.value
        return self._compose(v, -v * v, 2.0 * v * v * v)

    def tanh(self) -> "HyperDual":
        v = math.tanh(self.value)
        s = 1.0 - v * v
        return self._compose(v, s, -2.0 * v * s)

    def exp(self) -> "HyperDual":
        v = math.exp(self.value)
        return self._compose(v, v, v)

    def square(self) -> "HyperDual":
        return self._compose(self.value * self.value, 2.0 * self.value, 2.0)


###############################################################################
# Batched tape
###############################################################################

_N_CHANNELS = 3


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise DimensionMismatch(f"{op}: shapes {sa} and {sb} do not broadcast") from exc


class _Node:
    __slots__ = ("op", "parents", "val", "adj", "aux", "shape")

    def __init__(self, op: str, parents: tuple, shape: tuple, aux=None):
        self.op = op
        self.parents = parents
        self.shape = shape
        self.aux = aux
        self.val = [None, None, None]
        self.adj = None


class Var:
    """Handle to a tape node.  Supports arithmetic with other Vars and floats."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.idx].shape

    @property
    def value(self) -> np.ndarray:
        v = self.tape.nodes[self.idx].val[0]
        if v is None:
            raise UsageError("value read before forward()")
        return v

    def deriv(self, order: int) -> np.ndarray:
        """Input-derivative channel of this node (zeros if structurally zero)."""
        node = self.tape.nodes[self.idx]
        if node.val[0] is None:
            raise UsageError("derivative read before forward()")
        ch = node.val[order]
        return np.zeros(node.shape) if ch is None else ch

    def __add__(self, other):
        return self.tape.add(self, _as_var(self.tape, other))

    def __radd__(self, other):
        return self.tape.add(_as_var(self.tape, other), self)

    def __sub__(self, other):
        return self.tape.sub(self, _as_var(self.tape, other))

    def __rsub__(self, other):
        return self.tape.sub(_as_var(self.tape, other), self)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, 1.0 / float(other))
        return self.tape.div(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _as_var(tape: "Tape", x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(np.asarray(x, dtype=float))


class Tape:
    """Static computation graph over batched hyper-dual values.

    ``order`` fixes how many input-derivative channels are propagated
    (0: values only, 1: first derivatives, 2: first and second).  Leaves are
    constants, named inputs (refreshed between forward passes) and parameters
    (live views into a single flat parameter vector).
    """

    def __init__(self, order: int = 0):
        if order not in (0, 1, 2):
            raise UsageError(f"derivative order must be 0, 1 or 2, got {order}")
        self.order = order
        self.nodes: list[_Node] = []
        self.inputs: dict[str, int] = {}
        self.store = None
        self._ran_forward = False

    # -- leaves ---------------------------------------------------------

    def _append(self, node: _Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value, d1=None, d2=None) -> Var:
        value = np.asarray(value, dtype=float)
        node = _Node("const", (), value.shape)
        node.val[0] = value
        if d1 is not None and self.order >= 1:
            node.val[1] = np.asarray(d1, dtype=float)
        if d2 is not None and self.order >= 2:
            node.val[2] = np.asarray(d2, dtype=float)
        return self._append(node)

    def input(self, name: str, shape: tuple, seed: bool = False) -> Var:
        """Updatable leaf.  With ``seed=True`` the d1 channel is fixed to ones,
        marking this leaf as the scalar each batch row differentiates against."""
        if name in self.inputs:
            raise UsageError(f"duplicate input name {name!r}")
        node = _Node("input", (), tuple(shape), aux=seed)
        node.val[0] = np.zeros(shape)
        if seed and self.order >= 1:
            node.val[1] = np.ones(shape)
        var = self._append(node)
        self.inputs[name] = var.idx
        return var

    def set_input(self, name: str, value) -> None:
        idx = self.inputs.get(name)
        if idx is None:
            raise UsageError(f"unknown input {name!r}")
        node = self.nodes[idx]
        value = np.asarray(value, dtype=float)
        if value.shape != node.shape:
            raise DimensionMismatch(
                f"input {name!r} expects shape {node.shape}, got {value.shape}"
            )
        node.val[0] = value
        if node.aux and self.order >= 1:
            node.val[1] = np.ones(node.shape)

    def param(self, store, name: str) -> Var:
        """Leaf reading a named slice of ``store`` (a ParameterStore).  The
        backward sweep deposits this leaf's gradient at the slice's offset."""
        if self.store is None:
            self.store = store
        elif self.store is not store:
            raise UsageError("one tape may only reference a single parameter store")
        view = store.view(name)
        offset = store.offset(name)
        node = _Node("param", (), view.shape, aux=(offset, view.size))
        node.val[0] = view
        return self._append(node)

    # -- primitives -----------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        shape = _broadcast_shape(a.shape, b.shape, "add")
        return self._append(_Node("add", (a.idx, b.idx), shape))

    def sub(self, a: Var, b: Var) -> Var:
        shape = _broadcast_shape(a.shape, b.shape, "sub")
        return self._append(_Node("sub", (a.idx, b.idx), shape))

    def mul(self, a: Var, b: Var) -> Var:
        shape = _broadcast_shape(a.shape, b.shape, "mul")
        return self._append(_Node("mul", (a.idx, b.idx), shape))

    def div(self, a: Var, b: Var) -> Var:
        return self.mul(a, self._unary("recip", b))

    def scale(self, a: Var, c: float) -> Var:
        return self._append(_Node("scale", (a.idx,), a.shape, aux=float(c)))

    def shift(self, a: Var, c: float) -> Var:
        """Add a plain constant; derivative channels pass through unchanged."""
        return self._append(_Node("shift", (a.idx,), a.shape, aux=float(c)))

    def _unary(self, op: str, a: Var) -> Var:
        return self._append(_Node(op, (a.idx,), a.shape))

    def tanh(self, a: Var) -> Var:
        return self._unary("tanh", a)

    def exp(self, a: Var) -> Var:
        return self._unary("exp", a)

    def square(self, a: Var) -> Var:
        return self._unary("square", a)

    def matmul(self, a: Var, b: Var) -> Var:
        sa, sb = a.shape, b.shape
        if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
            raise DimensionMismatch(f"matmul: shapes {sa} and {sb}")
        batch = _broadcast_shape(sa[:-2], sb[:-2], "matmul")
        shape = batch + (sa[-2], sb[-1])
        return self._append(_Node("matmul", (a.idx, b.idx), shape))

    def linear(self, x: Var, w: Var, b: Var) -> Var:
        """Affine map ``x @ w.T + b`` with parameter (derivative-free) w, b."""
        if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[1]:
            raise DimensionMismatch(f"linear: input {x.shape} vs weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
        return self._append(_Node("linear", (x.idx, w.idx, b.idx), (x.shape[0], w.shape[0])))

    def transpose(self, a: Var) -> Var:
        if len(a.shape) < 2:
            raise DimensionMismatch(f"transpose needs a matrix, got {a.shape}")
        shape = a.shape[:-2] + (a.shape[-1], a.shape[-2])
        return self._append(_Node("transpose", (a.idx,), shape))

    def trace(self, a: Var) -> Var:
        if len(a.shape) < 2 or a.shape[-1] != a.shape[-2]:
            raise DimensionMismatch(f"trace needs square matrices, got {a.shape}")
        return self._append(_Node("trace", (a.idx,), a.shape[:-2]))

    def reshape(self, a: Var, shape: tuple) -> Var:
        shape = tuple(shape)
        if int(np.prod(shape, dtype=int)) != int(np.prod(a.shape, dtype=int)):
            raise DimensionMismatch(f"reshape {a.shape} -> {shape}")
        return self._append(_Node("reshape", (a.idx,), shape))

    def take_cols(self, a: Var, j0: int, j1: int) -> Var:
        if not 0 <= j0 < j1 <= a.shape[-1]:
            raise DimensionMismatch(f"take_cols [{j0}:{j1}] of {a.shape}")
        shape = a.shape[:-1] + (j1 - j0,)
        return self._append(_Node("take_cols", (a.idx,), shape, aux=(j0, j1)))

    def concat(self, parts: list) -> Var:
        if not parts:
            raise UsageError("concat of nothing")
        lead = parts[0].shape[:-1]
        for p in parts[1:]:
            if p.shape[:-1] != lead:
                raise DimensionMismatch(f"concat: {p.shape} vs leading {lead}")
        widths = [p.shape[-1] for p in parts]
        shape = lead + (sum(widths),)
        return self._append(_Node("concat", tuple(p.idx for p in parts), shape, aux=widths))

    def sum_all(self, a: Var) -> Var:
        return self._append(_Node("sum_all", (a.idx,), ()))

    def deriv(self, a: Var, k: int) -> Var:
        """Promote the k-th input-derivative channel of ``a`` to a value.

        The result's own derivative channels are the correspondingly shifted
        ones of ``a`` (Taylor shift), so d/dt of a promoted first derivative
        is the promoted second derivative.  Parameter gradients keep flowing:
        the reverse sweep maps the new value adjoint back onto channel k.
        """
        if k not in (1, 2):
            raise UsageError(f"deriv channel must be 1 or 2, got {k}")
        if k > self.order:
            raise UsageError(f"deriv({k}) on an order-{self.order} tape")
        return self._append(_Node("deriv", (a.idx,), a.shape, aux=k))

    # -- execution ------------------------------------------------------

    def forward(self, start: int = 0, upto: int | None = None) -> None:
        """Execute nodes ``start .. upto`` (inclusive); default is the whole graph.

        Partial execution supports staged evaluation: run the graph up to some
        node, inspect values, feed dependent inputs (masks, argmin controls),
        then finish.
        """
        order = self.order
        stop = len(self.nodes) if upto is None else upto + 1
        for node in self.nodes[start:stop]:
            op = node.op
            if op in ("const", "input", "param"):
                continue
            ps = [self.nodes[i].val for i in node.parents]
            v = node.val
            if op == "add":
                a, b = ps
                for k in range(order + 1):
                    if a[k] is None:
                        v[k] = b[k]
                    elif b[k] is None:
                        v[k] = a[k]
                    else:
                        v[k] = a[k] + b[k]
            elif op == "sub":
                a, b = ps
                for k in range(order + 1):
                    if b[k] is None:
                        v[k] = a[k]
                    elif a[k] is None:
                        v[k] = -b[k]
                    else:
                        v[k] = a[k] - b[k]
            elif op == "scale":
                (a,) = ps
                c = node.aux
                for k in range(order + 1):
                    v[k] = None if a[k] is None else c * a[k]
            elif op == "shift":
                (a,) = ps
                v[0] = a[0] + node.aux
                for k in range(1, order + 1):
                    v[k] = a[k]
            elif op == "mul":
                a, b = ps
                v[0] = a[0] * b[0]
                if order >= 1:
                    v[1] = _bilinear(a, b, 1, np.multiply)
                if order >= 2:
                    v[2] = _bilinear(a, b, 2, np.multiply)
            elif op == "matmul":
                a, b = ps
                v[0] = a[0] @ b[0]
                if order >= 1:
                    v[1] = _bilinear(a, b, 1, np.matmul)
                if order >= 2:
                    v[2] = _bilinear(a, b, 2, np.matmul)
            elif op == "linear":
                x, w, b = ps
                wt = w[0].T
                v[0] = x[0] @ wt + b[0]
                for k in range(1, order + 1):
                    v[k] = None if x[k] is None else x[k] @ wt
            elif op in ("tanh", "exp", "square", "recip"):
                (a,) = ps
                f0, f1 = _UNARY[op](a[0])
                v[0] = f0
                if order >= 1:
                    v[1] = None if a[1] is None else f1 * a[1]
                if order >= 2:
                    f2 = _UNARY2[op](f0, f1)
                    d2 = None
                    if a[1] is not None:
                        d2 = f2 * a[1] * a[1]
                    if a[2] is not None:
                        d2 = f1 * a[2] if d2 is None else d2 + f1 * a[2]
                    v[2] = d2
            elif op == "transpose":
                (a,) = ps
                for k in range(order + 1):
                    v[k] = None if a[k] is None else np.swapaxes(a[k], -1, -2)
            elif op == "trace":
                (a,) = ps
                for k in range(order + 1):
                    v[k] = None if a[k] is None else np.trace(a[k], axis1=-2, axis2=-1)
            elif op == "reshape":
                (a,) = ps
                for k in range(order + 1):
                    v[k] = None if a[k] is None else a[k].reshape(node.shape)
            elif op == "take_cols":
                (a,) = ps
                j0, j1 = node.aux
                for k in range(order + 1):
                    v[k] = None if a[k] is None else a[k][..., j0:j1]
            elif op == "concat":
                for k in range(order + 1):
                    if all(p[k] is None for p in ps):
                        v[k] = None
                    else:
                        v[k] = np.concatenate(
                            [
                                np.zeros(self.nodes[pi].shape) if p[k] is None else p[k]
                                for pi, p in zip(node.parents, ps)
                            ],
                            axis=-1,
                        )
            elif op == "sum_all":
                (a,) = ps
                for k in range(order + 1):
                    v[k] = None if a[k] is None else np.asarray(a[k].sum())
            elif op == "deriv":
                (a,) = ps
                shift = node.aux
                for k in range(order + 1):
                    src = k + shift
                    if src <= order and a[src] is not None:
                        v[k] = a[src]
                    else:
                        v[k] = np.zeros(node.shape) if k == 0 else None
            else:  # pragma: no cover
                raise UsageError(f"unknown op {op!r}")
        if stop >= len(self.nodes):
            self._ran_forward = True

    def check_finite(self, var: Var, label: str = "") -> None:
        node = self.nodes[var.idx]
        for k, ch in enumerate(node.val[: self.order + 1]):
            if ch is not None and not np.all(np.isfinite(ch)):
                what = label or f"node {var.idx} ({node.op})"
                raise NonFiniteValue(f"non-finite value in {what}, channel d{k}")

    def backward(self, loss: Var) -> np.ndarray:
        """Gradient of the scalar ``loss`` value w.r.t. the parameter store.

        Accumulation is non-inplace and runs in fixed reverse order, so the
        result is bit-identical across repeated calls with identical values.
        """
        if not self._ran_forward:
            raise UsageError("backward() before forward()")
        lnode = self.nodes[loss.idx]
        if lnode.shape != ():
            raise UsageError(f"loss must be scalar, got shape {lnode.shape}")
        if self.store is None:
            raise UsageError("tape has no parameters to differentiate")
        for node in self.nodes:
            node.adj = None
        lnode.adj = [np.asarray(1.0), None, None]
        grad = np.zeros(self.store.size)
        for idx in range(loss.idx, -1, -1):
            node = self.nodes[idx]
            adj = node.adj
            if adj is None:
                continue
            op = node.op
            if op == "param":
                if adj[0] is not None:
                    offset, size = node.aux
                    grad[offset : offset + size] += adj[0].ravel()
                continue
            if op in ("const", "input"):
                continue
            ps = [self.nodes[i] for i in node.parents]
            if op == "add":
                for k in range(self.order + 1):
                    if adj[k] is None:
                        continue
                    _acc(ps[0], k, adj[k])
                    _acc(ps[1], k, adj[k])
            elif op == "sub":
                for k in range(self.order + 1):
                    if adj[k] is None:
                        continue
                    _acc(ps[0], k, adj[k])
                    _acc(ps[1], k, -adj[k])
            elif op == "scale":
                c = node.aux
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, c * adj[k])
            elif op == "shift":
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, adj[k])
            elif op == "mul":
                _bilinear_adj(ps[0], ps[1], adj, self.order, np.multiply, None)
            elif op == "matmul":
                _bilinear_adj(ps[0], ps[1], adj, self.order, np.matmul, "mm")
            elif op == "linear":
                xn, wn, bn = ps
                w0 = wn.val[0]
                for k in range(self.order + 1):
                    g = adj[k]
                    if g is None:
                        continue
                    _acc(xn, k, g @ w0)
                    if xn.val[k] is not None:
                        _acc(wn, 0, g.T @ xn.val[k])
                    if k == 0:
                        _acc(bn, 0, g.sum(axis=0))
            elif op in ("tanh", "exp", "square", "recip"):
                _unary_adj(op, ps[0], node, adj, self.order)
            elif op == "transpose":
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, np.swapaxes(adj[k], -1, -2))
            elif op == "trace":
                n = ps[0].shape[-1]
                eye = np.eye(n)
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, adj[k][..., None, None] * eye)
            elif op == "reshape":
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, adj[k].reshape(ps[0].shape))
            elif op == "take_cols":
                j0, j1 = node.aux
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        g = np.zeros(ps[0].shape)
                        g[..., j0:j1] = adj[k]
                        _acc(ps[0], k, g)
            elif op == "concat":
                widths = node.aux
                for k in range(self.order + 1):
                    if adj[k] is None:
                        continue
                    j = 0
                    for p, w in zip(ps, widths):
                        _acc(p, k, adj[k][..., j : j + w])
                        j += w
            elif op == "sum_all":
                for k in range(self.order + 1):
                    if adj[k] is not None:
                        _acc(ps[0], k, adj[k] * np.ones(ps[0].shape))
            elif op == "deriv":
                shift = node.aux
                for k in range(self.order + 1):
                    if adj[k] is not None and k + shift <= self.order:
                        _acc(ps[0], k + shift, adj[k])
        return grad


def _acc(node: _Node, k: int, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g), node.shape)
    if node.adj is None:
        node.adj = [None, None, None]
    cur = node.adj[k]
    node.adj[k] = g if cur is None else cur + g


# Taylor product: channel k of a*b (or a@b) via the binomial-weighted convolution.
_BINOM = {1: (1.0, 1.0), 2: (1.0, 2.0, 1.0)}


def _bilinear(a, b, k: int, prod):
    out = None
    for j in range(k + 1):
        if a[j] is None or b[k - j] is None:
            continue
        term = prod(a[j], b[k - j])
        c = _BINOM[k][j]
        if c != 1.0:
            term = c * term
        out = term if out is None else out + term
    return out


def _bilinear_adj(an, bn, adj, order, prod, mode):
    """Adjoint of the Taylor product rule: transpose of the lower-triangular
    multiply-by-operand map, with matmul operands transposed appropriately."""
    for k in range(order + 1):
        g = adj[k]
        if g is None:
            continue
        for j in range(k + 1):
            c = _BINOM[k][j] if k else 1.0
            bv = bn.val[k - j]
            if bv is not None:
                term = g @ np.swapaxes(bv, -1, -2) if mode == "mm" else prod(g, bv)
                _acc(an, j, term if c == 1.0 else c * term)
            av = an.val[k - j]
            if av is not None:
                term = np.swapaxes(av, -1, -2) @ g if mode == "mm" else prod(g, av)
                _acc(bn, j, term if c == 1.0 else c * term)


# value and first derivative of each unary primitive, from the input value
_UNARY = {
    "tanh": lambda x: (lambda t: (t, 1.0 - t * t))(np.tanh(x)),
    "exp": lambda x: (lambda e: (e, e))(np.exp(x)),
    "square": lambda x: (x * x, 2.0 * x),
    "recip": lambda x: (lambda r: (r, -r * r))(1.0 / x),
}

# second derivative, from cached (f0, f1)
_UNARY2 = {
    "tanh": lambda f0, f1: -2.0 * f0 * f1,
    "exp": lambda f0, f1: f0,
    "square": lambda f0, f1: 2.0,
    "recip": lambda f0, f1: 2.0 * f0 * f0 * f0,
}

# third derivative, from (f0, f1, f2)
_UNARY3 = {
    "tanh": lambda f0, f1, f2: -2.0 * (f1 * f1 + f0 * f2),
    "exp": lambda f0, f1, f2: f0,
    "square": lambda f0, f1, f2: 0.0,
    "recip": lambda f0, f1, f2: -6.0 * f0 * f0 * f0 * f0,
}


def _unary_adj(op, pn, node, adj, order):
    f = pn.val
    f0 = f[0]
    h0 = node.val[0]
    # reconstruct phi' and phi'' from the cached forward value
    if op == "tanh":
        phi1 = 1.0 - h0 * h0
    elif op == "exp":
        phi1 = h0
    elif op == "square":
        phi1 = 2.0 * f0
    else:  # recip
        phi1 = -h0 * h0
    phi2 = _UNARY2[op](h0, phi1)
    g0, g1, g2 = adj
    if g0 is not None:
        _acc(pn, 0, g0 * phi1)
    if order >= 1 and g1 is not None:
        _acc(pn, 1, g1 * phi1)
        if f[1] is not None:
            _acc(pn, 0, g1 * phi2 * f[1])
    if order >= 2 and g2 is not None:
        _acc(pn, 2, g2 * phi1)
        if f[1] is not None:
            phi3 = _UNARY3[op](h0, phi1, phi2)
            _acc(pn, 1, 2.0 * g2 * phi2 * f[1])
            contrib = g2 * phi3 * f[1] * f[1]
            if f[2] is not None:
                contrib = contrib + g2 * phi2 * f[2]
            _acc(pn, 0, contrib)
        elif f[2] is not None:
            _acc(pn, 0, g2 * phi2 * f[2])


###############################################################################
# Convenience entry points
###############################################################################


def eval_with_input_derivs(net_fn, t, order: int):
    """Evaluate ``net_fn`` at scalar input(s) ``t`` with seeded derivatives.

    ``net_fn(tape, t_var) -> Var`` builds the function on a fresh tape; ``t``
    is a float or 1-d array of query points.  Returns ``(value, d1, d2)``
    arrays of shape ``(len(t), output_dim)``; channels beyond ``order`` are
    zero-filled.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise DimensionMismatch(f"expected scalar or 1-d input, got shape {t.shape}")
    tape = Tape(order)
    tv = tape.input("t", (t.size, 1), seed=True)
    tape.set_input("t", t[:, None])
    out = net_fn(tape, tv)
    tape.forward()
    tape.check_finite(out, "network output")
    value = out.value
    zeros = np.zeros_like(value)
    d1 = out.deriv(1) if order >= 1 else zeros
    d2 = out.deriv(2) if order >= 2 else zeros
    return value, d1, d2


def finite_difference_check(lossfn, params: np.ndarray, step: float = 1e-6) -> float:
    """Largest smoothed relative disagreement between AD and central differences.

    ``lossfn(values) -> (loss, grad)`` must evaluate the loss and its AD
    gradient at the given flat parameter vector.  Each coordinate of the
    gradient is compared against ``(f(x+h e_i) - f(x-h e_i)) / 2h``; the error
    is ``|ad - fd| / (1e-6 + max(|ad|, |fd|))`` so that zero-gradient
    coordinates are judged on an absolute scale.
    """
    params = np.asarray(params, dtype=float)
    _, grad = lossfn(params)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise DimensionMismatch(f"gradient shape {grad.shape} vs params {params.shape}")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += step
        up, _ = lossfn(bumped)
        bumped[i] -= 2.0 * step
        down, _ = lossfn(bumped)
        fd = (up - down) / (2.0 * step)
        err = abs(grad[i] - fd) / (1e-6 + max(abs(grad[i]), abs(fd)))
        worst = max(worst, err)
    return worst
