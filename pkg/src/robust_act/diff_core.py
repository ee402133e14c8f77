"""Reverse-mode automatic differentiation on an explicit tape, plus Adam.

A :class:`Tape` is an append-only list of nodes. Each node records the
primitive that produced it, the indices of its operands (always earlier
nodes) and, after :meth:`Tape.forward`, its cached value. Graphs are built
once symbolically through :class:`Var` handles and can be re-evaluated on new
inputs any number of times::

    tape = Tape()
    x = tape.input("x")
    y = tape.input("y")
    tape.output(x * y + y)
    tape.forward([2.0, 3.0])     # -> [9.0]
    tape.backward(0)             # -> [3.0, 3.0]

Node values are float64 numpy arrays; a scalar is simply a 0-d array. The
elementwise primitives broadcast like numpy and their gradients are summed
back to operand shapes.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigurationError, NonFiniteError, StateError

__all__ = [
    "Tape",
    "Var",
    "exp",
    "log",
    "tanh",
    "square",
    "reciprocal",
    "minimum",
    "maximum",
    "clip",
    "reduce_sum",
    "mean",
    "ParameterVector",
    "AdamState",
    "adam_step",
    "tape_forward",
    "tape_backward",
    "save_parameters",
    "load_parameters",
]

_INPUT = "input"
_CONST = "const"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fwd_sum(x, axis):
    return np.sum(x, axis=axis)


def _bwd_sum(g, args, out, axis):
    x = args[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


# kind -> (forward(*operand_values, attr), backward(grad, operand_values, out, attr))
_PRIMITIVES = {
    "add": (
        lambda a, b, _: a + b,
        lambda g, args, out, _: (_unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)),
    ),
    "mul": (
        lambda a, b, _: a * b,
        lambda g, args, out, _: (
            _unbroadcast(g * args[1], args[0].shape),
            _unbroadcast(g * args[0], args[1].shape),
        ),
    ),
    "neg": (lambda a, _: -a, lambda g, args, out, _: (-g,)),
    "reciprocal": (lambda a, _: 1.0 / a, lambda g, args, out, _: (-g * out * out,)),
    "exp": (lambda a, _: np.exp(a), lambda g, args, out, _: (g * out,)),
    "log": (lambda a, _: np.log(a), lambda g, args, out, _: (g / args[0],)),
    "tanh": (lambda a, _: np.tanh(a), lambda g, args, out, _: (g * (1.0 - out * out),)),
    "square": (lambda a, _: a * a, lambda g, args, out, _: (2.0 * g * args[0],)),
    "matmul": (
        lambda a, b, _: a @ b,
        lambda g, args, out, _: (g @ args[1].T, args[0].T @ g),
    ),
    "sum": (_fwd_sum, _bwd_sum),
    # Ties send the whole gradient to the first operand.
    "minimum": (
        lambda a, b, _: np.minimum(a, b),
        lambda g, args, out, _: (
            _unbroadcast(np.where(args[0] <= args[1], g, 0.0), args[0].shape),
            _unbroadcast(np.where(args[0] <= args[1], 0.0, g), args[1].shape),
        ),
    ),
    "maximum": (
        lambda a, b, _: np.maximum(a, b),
        lambda g, args, out, _: (
            _unbroadcast(np.where(args[0] >= args[1], g, 0.0), args[0].shape),
            _unbroadcast(np.where(args[0] >= args[1], 0.0, g), args[1].shape),
        ),
    ),
}


class Var:
    """Handle to a node on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ConfigurationError("cannot mix nodes from different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.apply("add", self, -self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("add", self._lift(other), -self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        if not isinstance(other, Var):
            return self * (1.0 / np.asarray(other, dtype=np.float64))
        return self * reciprocal(other)

    def __rtruediv__(self, other):
        return self._lift(other) * reciprocal(self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", self._lift(other), self)

    @property
    def value(self):
        return self.tape.value(self)

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape._kinds[self.index]})"


def exp(x):
    return x.tape.apply("exp", x)


def log(x):
    return x.tape.apply("log", x)


def tanh(x):
    return x.tape.apply("tanh", x)


def square(x):
    return x.tape.apply("square", x)


def reciprocal(x):
    return x.tape.apply("reciprocal", x)


def minimum(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    return tape.apply("minimum", _as_var(tape, a), _as_var(tape, b))


def maximum(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    return tape.apply("maximum", _as_var(tape, a), _as_var(tape, b))


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def reduce_sum(x, axis=None):
    return x.tape.apply("sum", x, attr=axis)


def mean(x, axis=None):
    """Mean over ``axis`` (composed from sum and a constant scale)."""
    shape = x.tape.shape_hint(x)
    if shape is None:
        raise StateError("mean() needs a known operand shape; build it from shaped inputs")
    n = int(np.prod(shape)) if axis is None else shape[axis]
    return reduce_sum(x, axis) * (1.0 / n)


def _as_var(tape, x):
    return x if isinstance(x, Var) else tape.const(x)


class Tape:
    """Append-only expression graph evaluated by :meth:`forward`.

    Inputs are declared with :meth:`input` (optionally with a shape, which
    enables :func:`mean`), outputs with :meth:`output`. ``forward`` must be
    called before ``backward``; appending nodes invalidates cached values.
    """

    def __init__(self):
        self._kinds = []
        self._operands = []
        self._attrs = []
        self._values = []
        self._shapes = []
        self._inputs = []
        self._input_names = []
        self._outputs = []
        self._evaluated = False

    def __len__(self):
        return len(self._kinds)

    @property
    def arity(self):
        return len(self._inputs)

    @property
    def input_names(self):
        return list(self._input_names)

    def _append(self, kind, operands, attr, shape, value=None):
        self._kinds.append(kind)
        self._operands.append(operands)
        self._attrs.append(attr)
        self._shapes.append(shape)
        self._values.append(value)
        self._evaluated = False
        return Var(self, len(self._kinds) - 1)

    def input(self, name=None, shape=None):
        shape = None if shape is None else tuple(shape)
        var = self._append(_INPUT, (), None, shape)
        self._inputs.append(var.index)
        self._input_names.append(name if name is not None else f"in{len(self._inputs) - 1}")
        return var

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        return self._append(_CONST, (), None, value.shape, value)

    def apply(self, kind, *operands, attr=None):
        if kind not in _PRIMITIVES:
            raise ConfigurationError(f"unknown primitive {kind!r}")
        for op in operands:
            if op.tape is not self:
                raise ConfigurationError("operand belongs to another tape")
        shape = self._infer_shape(kind, [self._shapes[op.index] for op in operands], attr)
        return self._append(kind, tuple(op.index for op in operands), attr, shape)

    @staticmethod
    def _infer_shape(kind, shapes, attr):
        if any(s is None for s in shapes):
            return None
        if kind == "matmul":
            a, b = shapes
            return a[:-1] + b[1:]
        if kind == "sum":
            if attr is None:
                return ()
            s = list(shapes[0])
            del s[attr]
            return tuple(s)
        if len(shapes) == 2:
            return tuple(np.broadcast_shapes(*shapes))
        return shapes[0]

    def shape_hint(self, var):
        return self._shapes[var.index]

    def output(self, var):
        """Declare ``var`` as an output; returns its output index."""
        self._outputs.append(var.index)
        return len(self._outputs) - 1

    def forward(self, inputs):
        """Evaluate every node for the given input values.

        Returns the list of output values (floats for 0-d outputs).
        """
        if len(inputs) != len(self._inputs):
            raise ConfigurationError(
                f"tape expects {len(self._inputs)} inputs, got {len(inputs)}"
            )
        values = self._values
        for idx, x in zip(self._inputs, inputs):
            values[idx] = np.asarray(x, dtype=np.float64)
        kinds, operands, attrs = self._kinds, self._operands, self._attrs
        for i in range(len(kinds)):
            kind = kinds[i]
            if kind is _INPUT or kind is _CONST:
                continue
            fwd = _PRIMITIVES[kind][0]
            values[i] = np.asarray(fwd(*[values[j] for j in operands[i]], attrs[i]))
        self._evaluated = True
        return [_scalarize(values[i]) for i in self._outputs]

    def value(self, var):
        if not self._evaluated:
            raise StateError("tape has not been evaluated")
        return _scalarize(self._values[var.index])

    def backward(self, output_index=0, seed=None):
        """Reverse sweep from one declared output.

        Returns gradients of that output w.r.t. every declared input, in
        declaration order, each shaped like its input. ``seed`` overrides the
        upstream gradient (default: ones, i.e. the output is summed).
        """
        if not self._evaluated:
            raise StateError("backward() called before forward()")
        if not 0 <= output_index < len(self._outputs):
            raise ConfigurationError(f"no output with index {output_index}")
        root = self._outputs[output_index]
        values = self._values
        grads = [None] * (root + 1)
        grads[root] = (
            np.ones_like(values[root]) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        kinds, operands, attrs = self._kinds, self._operands, self._attrs
        for i in range(root, -1, -1):
            g = grads[i]
            if g is None:
                continue
            kind = kinds[i]
            if kind is _INPUT or kind is _CONST:
                continue
            ops = operands[i]
            bwd = _PRIMITIVES[kind][1]
            contributions = bwd(g, [values[j] for j in ops], values[i], attrs[i])
            for j, c in zip(ops, contributions):
                if grads[j] is None:
                    grads[j] = c
                else:
                    grads[j] = grads[j] + c
        out = []
        for idx in self._inputs:
            g = grads[idx] if idx <= root else None
            out.append(np.zeros_like(values[idx]) if g is None else _scalarize(g))
        return out


def _scalarize(v):
    return float(v) if np.ndim(v) == 0 else v


def tape_forward(tape, inputs):
    return tape.forward(inputs)


def tape_backward(tape, output_index=0):
    return tape.backward(output_index)


class ParameterVector:
    """Flat float64 array of trainable scalars with a named segment map.

    ``segments`` maps name -> (offset, length); segments are contiguous,
    disjoint and cover the array.
    """

    def __init__(self, values, segments):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.segments = OrderedDict((k, (int(o), int(n))) for k, (o, n) in segments.items())
        self._check_layout()

    @classmethod
    def from_arrays(cls, arrays):
        """Build from an ordered mapping name -> array (flattened in order)."""
        segments = OrderedDict()
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64).ravel()
            segments[name] = (offset, arr.size)
            chunks.append(arr)
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    def _check_layout(self):
        pos = 0
        for name, (offset, length) in sorted(self.segments.items(), key=lambda kv: kv[1][0]):
            if offset != pos or length < 0:
                raise ConfigurationError(f"segment {name!r} breaks contiguous layout")
            pos += length
        if pos != self.values.size:
            raise ConfigurationError(
                f"segments cover {pos} values but the array holds {self.values.size}"
            )

    def __len__(self):
        return self.values.size

    def segment(self, name):
        """Writable flat view of one segment."""
        offset, length = self.segments[name]
        return self.values[offset:offset + length]

    def segment_of(self, index):
        for name, (offset, length) in self.segments.items():
            if offset <= index < offset + length:
                return name
        raise IndexError(index)

    def copy(self):
        return ParameterVector(self.values.copy(), self.segments)

    def __eq__(self, other):
        return (
            isinstance(other, ParameterVector)
            and self.segments == other.segments
            and np.array_equal(self.values, other.values)
        )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteError` naming the first segment with a NaN/Inf
    gradient; in that case neither ``params`` nor ``state`` is modified.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ConfigurationError(
            f"gradient length {grads.size} != parameter length {params.values.size}"
        )
    bad = ~np.isfinite(grads)
    if bad.any():
        seg = params.segment_of(int(np.argmax(bad)))
        raise NonFiniteError(f"non-finite gradient in segment {seg!r}", segment=seg)

    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --- checkpoint format -----------------------------------------------------
# "RACT" | u32 version | u32 segment count |
#   per segment: u32 name length, name (utf-8), u64 offset, u64 length |
# f64 values, little endian.

MAGIC = b"RACT"
FORMAT_VERSION = 1


def save_parameters(params, path):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(params.segments))
    for name, (offset, length) in params.segments.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", offset, length)
    buf += params.values.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_parameters(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        pos = 12
        segments = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            offset, length = struct.unpack_from("<QQ", data, pos)
            pos += 16
            segments[name] = (offset, length)
        values = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    try:
        return ParameterVector(values, segments)
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
