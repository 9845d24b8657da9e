"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the primitives needed by the models in this package exist. A
:class:`Tape` is opened as a context manager; every primitive applied while
it is active, with at least one tracked input, is recorded together with a
closure computing its vector-Jacobian product. ``Tape.backward`` walks the
records in reverse and returns a :class:`GradientMap` for the watched leaves.

Training storage is float32. Any tensor built from float64 data stays float64
through every primitive, which is how the finite-difference checks run.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from scipy.special import expit

from . import kernels

LAYERNORM_EPS = 1e-5

PRIMITIVES = (
    "matmul",
    "add",
    "elementwise_mul",
    "relu",
    "sigmoid",
    "softmax_lastdim",
    "layernorm_lastdim",
    "scalar_scale",
    "sum",
    "concat_lastdim",
    # needed by the model on top of the core list
    "take_lastdim",
    "embedding_lookup",
    "bce",
)


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class MissingGradientError(AutodiffError, KeyError):
    pass


class Tensor:
    """A dense row-major array, optionally tracked by the active tape."""

    __slots__ = ("data", "node_id", "_tape")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, node={self.node_id})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return elementwise_mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return elementwise_mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class GradientMap(dict):
    """node_id -> gradient array, with lookup by tensor.

    ``reached`` holds the leaf ids that actually lie on a path from the loss;
    the others carry zero gradients.
    """

    reached = None

    def of(self, tensor):
        if tensor.node_id is None or tensor.node_id not in self:
            raise MissingGradientError(f"no gradient recorded for {tensor!r}")
        return self[tensor.node_id]


class _Record:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


_state = threading.local()


def active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered log of primitive applications for one training step."""

    def __init__(self):
        self.records = []
        self.leaves = {}
        self._ids = itertools.count()
        self._outputs = []
        self._prev = None

    def __enter__(self):
        self._prev = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def tracks(self, t):
        return t.node_id is not None and t._tape is self

    def watch(self, *tensors):
        for t in tensors:
            if self.tracks(t):
                continue
            if t._tape is not None:
                raise AutodiffError(f"{t!r} is already tracked by another tape")
            t.node_id = next(self._ids)
            t._tape = self
            self.leaves[t.node_id] = t
        return tensors[0] if len(tensors) == 1 else tensors

    def _record(self, kind, inputs, out, backward):
        out.node_id = next(self._ids)
        out._tape = self
        self._outputs.append(out)
        self.records.append(_Record(kind, inputs, out, backward))

    def clear(self):
        for t in itertools.chain(self.leaves.values(), self._outputs):
            t.node_id = None
            t._tape = None
        self.records.clear()
        self.leaves.clear()
        self._outputs.clear()

    def backward(self, loss):
        if not isinstance(loss, Tensor) or not self.tracks(loss):
            raise AutodiffError("loss is not recorded on this tape")
        if loss.shape != (1,):
            raise ShapeError(f"backward needs a scalar loss of shape [1], got {list(loss.shape)}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.node_id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not self.tracks(x):
                    continue
                if x.node_id in grads:
                    grads[x.node_id] = grads[x.node_id] + gx
                else:
                    grads[x.node_id] = gx
        out = GradientMap()
        out.reached = set()
        for nid, leaf in self.leaves.items():
            g = grads.get(nid)
            if g is None:
                out[nid] = np.zeros_like(leaf.data)
            else:
                out[nid] = g
                out.reached.add(nid)
        return out


def backward(tape, loss):
    return tape.backward(loss)


def _emit(kind, inputs, out_data, backward_fn):
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind}: non-finite output")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape._record(kind, tuple(inputs), out, backward_fn)
    return out


def _broadcast(kind, a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape is None or (shape != a.shape and shape != b.shape):
        raise ShapeError(f"{kind}: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return shape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, bw)


def add(a, b):
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, bw)


def elementwise_mul(a, b):
    _broadcast("elementwise_mul", a, b)
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit("elementwise_mul", (a, b), A * B, bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), bw)


def sigmoid(a):
    s = expit(a.data)

    def bw(g):
        return (g * s * (1 - s),)

    return _emit("sigmoid", (a,), s, bw)


def softmax_lastdim(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", (a,), s, bw)


def layernorm_lastdim(a, eps=LAYERNORM_EPS):
    """Normalize along the last dimension; no learnable scale or shift."""
    shape = a.shape
    x2 = a.data.reshape(-1, shape[-1])
    y, inv_std = kernels.layernorm_forward(x2, eps)

    def bw(g):
        return (kernels.layernorm_backward(g.reshape(y.shape), y, inv_std).reshape(shape),)

    return _emit("layernorm_lastdim", (a,), y.reshape(shape), bw)


def scalar_scale(a, c):
    c = float(c)
    dtype = a.dtype

    def bw(g):
        return ((g * c).astype(dtype),)

    return _emit("scalar_scale", (a,), (a.data * c).astype(dtype), bw)


def sum_all(a):
    shape, dtype = a.shape, a.dtype

    def bw(g):
        return (np.broadcast_to(g.reshape((1,) * len(shape)), shape).astype(dtype),)

    return _emit("sum", (a,), np.array([a.data.sum()], dtype=dtype), bw)


def concat_lastdim(tensors):
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError(
            "concat_lastdim: leading dims differ: " + ", ".join(str(list(t.shape)) for t in tensors)
        )
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat_lastdim", tensors, np.concatenate([t.data for t in tensors], axis=-1), bw)


def take_lastdim(a, index):
    """Select columns of the last dimension; an int index keeps the axis with size 1."""
    idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
    n = a.shape[-1]
    if idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"take_lastdim: index {index} out of range for last dim {n}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (..., idx), g)
        return (out,)

    return _emit("take_lastdim", (a,), a.data[..., idx], bw)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: table {list(table.shape)}, ids {list(ids.shape)}")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        kernels.scatter_add_rows(out, ids, g)
        return (out,)

    return _emit("embedding_lookup", (table,), kernels.gather_rows(table.data, ids), bw)


BCE_CLAMP = 1e-7


def bce(pred, labels):
    """Mean over rows of the per-row summed binary cross-entropy.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; clamped entries pass no
    gradient.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"bce: predictions {list(pred.shape)} vs labels {list(y.shape)}")
    p = pred.data.astype(np.float64)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.shape[0]
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n
    inside = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)
    dtype = pred.dtype

    def bw(g):
        d = (pc - y) / (pc * (1 - pc)) / n * inside
        return ((d * g[0]).astype(dtype),)

    return _emit("bce", (pred,), np.array([loss], dtype=dtype), bw)


_DISPATCH = {
    "matmul": "matmul",
    "add": "add",
    "elementwise_mul": "elementwise_mul",
    "relu": "relu",
    "sigmoid": "sigmoid",
    "softmax_lastdim": "softmax_lastdim",
    "layernorm_lastdim": "layernorm_lastdim",
    "scalar_scale": "scalar_scale",
    "sum": "sum_all",
    "concat_lastdim": "concat_lastdim",
    "take_lastdim": "take_lastdim",
    "embedding_lookup": "embedding_lookup",
    "bce": "bce",
}


def apply_primitive(kind, *inputs, **attrs):
    """Apply a primitive by name, e.g. ``apply_primitive("scalar_scale", x, c=0.5)``."""
    try:
        fn = globals()[_DISPATCH[kind]]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    if kind == "concat_lastdim":
        return fn(inputs)
    return fn(*inputs, **attrs)


class SGD:
    """Plain gradient descent over a named parameter set.

    Parameters whose leaf received no gradient flow in the step (unreachable
    from the loss) are skipped, so their optimizer state does not advance.
    """

    kind = "sgd"

    def __init__(self, params):
        self.params = dict(params)
        self.steps = {k: 0 for k in self.params}

    def _grads(self, grads):
        for name, p in self.params.items():
            try:
                g = grads.of(p)
            except MissingGradientError:
                raise MissingGradientError(f"missing gradient for parameter {name!r}") from None
            if grads.reached is not None and p.node_id not in grads.reached:
                continue
            yield name, p, g

    def step(self, grads, lr):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        for name, p, g in list(self._grads(grads)):
            with np.errstate(over="ignore", invalid="ignore"):
                upd = p.data - np.asarray(lr, dtype=p.dtype) * g
            if not np.all(np.isfinite(upd)):
                raise NonFiniteError(f"non-finite update for parameter {name!r}")
            p.data[...] = upd
            self.steps[name] += 1

    def state_tensors(self):
        return {f"t.{k}": np.array([v], dtype=np.float32) for k, v in self.steps.items()}

    def load_state(self, tensors):
        for k in self.params:
            self.steps[k] = int(tensors[f"t.{k}"][0])


class Adam(SGD):
    """Adam with per-parameter bias correction."""

    kind = "adam"

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads, lr):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        b1, b2 = self.beta1, self.beta2
        for name, p, g in list(self._grads(grads)):
            t = self.steps[name] + 1
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            with np.errstate(over="ignore", invalid="ignore"):
                upd = (lr / (1 - b1**t)) * m / (np.sqrt(v / (1 - b2**t)) + self.eps)
                new = p.data - upd.astype(p.dtype)
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"non-finite update for parameter {name!r}")
            p.data[...] = new
            self.steps[name] = t

    def state_tensors(self):
        out = super().state_tensors()
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors):
        super().load_state(tensors)
        for k in self.params:
            self.m[k][...] = tensors[f"m.{k}"]
            self.v[k][...] = tensors[f"v.{k}"]


def make_optimizer(kind, params):
    if kind == "adam":
        return Adam(params)
    if kind == "sgd":
        return SGD(params)
    raise ValueError(f"unknown optimizer {kind!r}")
