"""Small tanh MLPs over a flat parameter vector, with output heads.

All trainable state of a problem (every network plus any learnable scalars
such as a free final time) lives in one :class:`ParameterStore`: a flat
float64 vector with named slices.  Gradients come back from the tape in the
same layout, so an optimizer step is a single vector update and training is
trivially reproducible.

Estimator networks follow the same recipe throughout: linear layers with
tanh activations between them, Glorot-uniform weights, zero biases, and one
of three output heads:

``linear``
    raw affine output.
``psd``
    the raw output is reshaped to a square matrix P and the head returns
    P^T P, which is symmetric positive semidefinite by construction (used
    for covariance estimates).
``bounded``
    elementwise tanh, constraining outputs to the open interval (-1, 1)
    (used for saturating controls).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var

__all__ = [
    "MlpSpec",
    "ParameterStore",
    "LearnableScalar",
    "UnknownName",
    "CheckpointError",
    "glorot_init",
    "add_mlp",
    "mlp_forward",
    "mlp_value",
    "save_checkpoint",
    "load_checkpoint",
]

HEADS = ("linear", "psd", "bounded")


class UnknownName(KeyError):
    """A parameter slice name that the store does not contain."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or does not match the requesting layout."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one estimator network.

    ``output_dim`` is the width of the raw final layer; for the ``psd`` head
    it must be a perfect square n*n and the head emits n-by-n matrices.
    """

    input_dim: int
    output_dim: int
    hidden: tuple = (64, 64, 64, 64, 64)
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.head == "psd":
            n = math.isqrt(self.output_dim)
            if n * n != self.output_dim:
                raise ValueError(
                    f"psd head needs a square output_dim, got {self.output_dim}"
                )

    @property
    def matrix_dim(self) -> int:
        return math.isqrt(self.output_dim)

    def layer_dims(self) -> list:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


class ParameterStore:
    """Flat float64 parameter vector with named, shaped slices.

    Built incrementally with :meth:`add` and then frozen; all reads after
    freezing are live views into :attr:`values`, so in-place updates of the
    flat vector are immediately visible to every view (the tape relies on
    this to avoid re-binding parameters between epochs).
    """

    def __init__(self):
        self._pending: list = []
        self._slices: dict[str, tuple] = {}
        self.values: np.ndarray | None = None

    def add(self, name: str, array: np.ndarray) -> None:
        if self.values is not None:
            raise RuntimeError("store is frozen; cannot add slices")
        if name in self._slices or any(n == name for n, _ in self._pending):
            raise ValueError(f"duplicate parameter name {name!r}")
        self._pending.append((name, np.asarray(array, dtype=float)))

    def freeze(self) -> "ParameterStore":
        if self.values is not None:
            return self
        offset = 0
        chunks = []
        for name, array in self._pending:
            self._slices[name] = (offset, array.shape)
            chunks.append(array.ravel())
            offset += array.size
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)
        self._pending = []
        return self

    @property
    def size(self) -> int:
        self._require_frozen()
        return self.values.size

    def names(self) -> list:
        self._require_frozen()
        return list(self._slices)

    def offset(self, name: str) -> int:
        return self._lookup(name)[0]

    def shape(self, name: str) -> tuple:
        return self._lookup(name)[1]

    def view(self, name: str) -> np.ndarray:
        offset, shape = self._lookup(name)
        size = int(np.prod(shape, dtype=int)) if shape else 1
        return self.values[offset : offset + size].reshape(shape)

    def get_scalar(self, name: str) -> float:
        return float(self.view(name))

    def set_scalar(self, name: str, value: float) -> None:
        offset, shape = self._lookup(name)
        if shape != ():
            raise UnknownName(f"{name!r} is not a scalar slice")
        self.values[offset] = value

    def apply_update(self, delta: np.ndarray) -> None:
        """In-place ``values += delta``; the only sanctioned way to mutate."""
        self._require_frozen()
        if delta.shape != self.values.shape:
            raise ValueError(f"update shape {delta.shape} vs store {self.values.shape}")
        self.values += delta

    def mask(self, prefixes) -> np.ndarray:
        """Boolean mask over :attr:`values` selecting slices by name prefix."""
        self._require_frozen()
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        out = np.zeros(self.size, dtype=bool)
        for name, (offset, shape) in self._slices.items():
            if any(name.startswith(p) for p in prefixes):
                size = int(np.prod(shape, dtype=int)) if shape else 1
                out[offset : offset + size] = True
        return out

    def clone_values(self) -> np.ndarray:
        self._require_frozen()
        return self.values.copy()

    def load_values(self, values: np.ndarray) -> None:
        self._require_frozen()
        if values.shape != self.values.shape:
            raise ValueError(f"value vector shape {values.shape} vs {self.values.shape}")
        self.values[:] = values

    def _require_frozen(self):
        if self.values is None:
            raise RuntimeError("store must be frozen first")

    def _lookup(self, name: str) -> tuple:
        self._require_frozen()
        try:
            return self._slices[name]
        except KeyError:
            raise UnknownName(name) from None


@dataclass
class LearnableScalar:
    """A trained scalar (free final time, terminal multiplier) with clamp bounds."""

    name: str
    init: float
    lower: float | None = None
    upper: float | None = None

    def clamp(self, store: ParameterStore) -> None:
        v = store.get_scalar(self.name)
        if self.lower is not None and v < self.lower:
            store.set_scalar(self.name, self.lower)
        elif self.upper is not None and v > self.upper:
            store.set_scalar(self.name, self.upper)


def add_mlp(store: ParameterStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    """Append Glorot-uniform weights and zero biases for ``spec`` under ``prefix``."""
    for i, (fan_out, fan_in) in enumerate(spec.layer_dims()):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}W{i}", rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        store.add(f"{prefix}b{i}", np.zeros(fan_out))


def glorot_init(spec: MlpSpec, seed: int) -> ParameterStore:
    """Fresh store for a single network; same seed gives identical weights."""
    store = ParameterStore()
    add_mlp(store, "", spec, np.random.default_rng(seed))
    return store.freeze()


def mlp_forward(tape: Tape, store: ParameterStore, prefix: str, spec: MlpSpec, x: Var) -> Var:
    """Record the network's forward pass on ``tape``; returns the head output.

    ``x`` must be a batched 2-d Var of width ``spec.input_dim``.  With the psd
    head the result is a batch of matrices, otherwise a batch of vectors.
    """
    h = x
    n_hidden = len(spec.hidden)
    for i in range(n_hidden + 1):
        w = tape.param(store, f"{prefix}W{i}")
        b = tape.param(store, f"{prefix}b{i}")
        h = tape.linear(h, w, b)
        if i < n_hidden:
            h = tape.tanh(h)
    if spec.head == "bounded":
        return tape.tanh(h)
    if spec.head == "psd":
        n = spec.matrix_dim
        p = tape.reshape(h, (x.shape[0], n, n))
        return tape.matmul(tape.transpose(p), p)
    return h


def mlp_value(store: ParameterStore, prefix: str, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain forward evaluation (no derivatives), for rollouts and metrics."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != spec.input_dim:
        raise ValueError(f"input width {h.shape[1]}, spec wants {spec.input_dim}")
    n_hidden = len(spec.hidden)
    for i in range(n_hidden + 1):
        w = store.view(f"{prefix}W{i}")
        b = store.view(f"{prefix}b{i}")
        h = h @ w.T + b
        if i < n_hidden:
            h = np.tanh(h)
    if spec.head == "bounded":
        return np.tanh(h)
    if spec.head == "psd":
        n = spec.matrix_dim
        p = h.reshape(h.shape[0], n, n)
        return np.swapaxes(p, -1, -2) @ p
    return h


###############################################################################
# Checkpoints
###############################################################################

_MAGIC = "calvnet-checkpoint"


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None) -> None:
    """Write the store as a JSON header line plus raw little-endian float64."""
    store._require_frozen()
    header = {
        "format": _MAGIC,
        "version": 1,
        "slices": [[name, list(store.shape(name))] for name in store.names()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(store.values.astype("<f8").tobytes())


def load_checkpoint(path, expect_meta: dict | None = None):
    """Read a checkpoint back into a fresh store; returns ``(store, meta)``.

    If ``expect_meta`` is given, every key in it must match the stored meta
    exactly; a disagreement raises :class:`CheckpointError` rather than
    silently reinterpreting the parameter vector.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    if header.get("format") != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    slices = header.get("slices", [])
    total = sum(int(np.prod(shape, dtype=int)) if shape else 1 for _, shape in slices)
    if len(payload) != total * 8:
        raise CheckpointError(
            f"payload of {len(payload)} bytes does not match {total} parameters"
        )
    meta = header.get("meta", {})
    if expect_meta:
        for key, want in expect_meta.items():
            got = meta.get(key)
            if got != want:
                raise CheckpointError(
                    f"checkpoint meta mismatch for {key!r}: stored {got!r}, expected {want!r}"
                )
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    store = ParameterStore()
    pos = 0
    for name, shape in slices:
        size = int(np.prod(shape, dtype=int)) if shape else 1
        store.add(name, values[pos : pos + size].reshape([int(s) for s in shape]))
        pos += size
    return store.freeze(), meta
