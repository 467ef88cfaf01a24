"""Dense tensors with a recorded computation tape and reverse-mode gradients.

Values live in numpy arrays; every differentiable operation appends a node
to the thread-local active tape (if one is open), and ``backward`` replays
the tape in reverse to populate ``.grad`` on every reachable tensor.  Ops
executed with no tape open are plain numpy computations, which is how
inference and teacher passes run.

Float64 is the verification dtype (finite-difference checks need the
headroom); float32 is fine for training and is selected through the model
config.  Finiteness of every op output is checked while ``finite_checks``
is enabled (the default); the training loop disables it in the hot path
and guards the loss instead.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericError, ShapeMismatchError

_TLS = threading.local()
_CHECK_FINITE = True


def active_tape():
    """The tape currently recording on this thread, or None."""
    return getattr(_TLS, "tape", None)


@contextmanager
def finite_checks(enabled):
    """Temporarily enable/disable the per-op NaN/Inf guard."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """A dense n-dimensional array, optionally attached to a tape node."""

    __slots__ = ("data", "grad", "node_id", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if _CHECK_FINITE and not np.isfinite(arr).all():
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad = None
        self.node_id = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")

    def detach(self):
        """Same values, severed from any tape (a constant leaf)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.node_id = None
        out.requires_grad = False
        out._tape = None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # operator sugar; scalars are accepted on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Append-only record of ops, replayed in reverse by ``backward``.

    Node order is a topological order by construction: an op's inputs are
    always recorded (or constant) before its output.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._prev = getattr(_TLS, "tape", None)
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = self._prev
        return False

    def record(self, out, inputs, backward_fn):
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self.nodes)


def _tracked(t):
    return isinstance(t, Tensor) and (t.requires_grad or t.node_id is not None)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(value, inputs, backward_fn):
    """Wrap an op result; record a node if a tape is open and any input is live."""
    if _CHECK_FINITE and not np.isfinite(value).all():
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.node_id = None
    out.requires_grad = False
    out._tape = None
    tape = getattr(_TLS, "tape", None)
    if tape is not None and any(_tracked(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    The tape is visited exactly once, in reverse creation order; nodes that
    received no incoming gradient are skipped.
    """
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise GraphError("backward: loss is not recorded on a tape")
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not _tracked(inp):
                continue
            inp.grad = g if inp.grad is None else inp.grad + g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(value, (a, b), back)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(value, (a, b), back)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(value, (a, b), back)


def div(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(value, (a, b), back)


def neg(a):
    value = -a.data

    def back(g):
        return (-g,)

    return _make(value, (a,), back)


def absval(a):
    value = np.abs(a.data)
    sign = np.sign(a.data)

    def back(g):
        return (g * sign,)

    return _make(value, (a,), back)


def maximum(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = np.maximum(a.data, b.data)
    take_a = a.data >= b.data  # ties route to the first operand

    def back(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(value, (a, b), back)


def minimum(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    value = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(value, (a, b), back)


def clip(a, lo, hi):
    value = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)

    return _make(value, (a,), back)


def log(a):
    value = np.log(a.data)
    inv = 1.0 / a.data

    def back(g):
        return (g * inv,)

    return _make(value, (a,), back)


def sigmoid(a):
    e = np.exp(-np.abs(a.data))
    value = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * value * (1.0 - value),)

    return _make(value, (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit (tanh form)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(value, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    value = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(value, (a, b), back)


def linear(x, w, b):
    """Fused ``x @ w + b`` for 2-D ``x``; one tape node instead of two."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"linear: {x.shape} @ {w.shape}")
    value = np.matmul(x.data, w.data) + b.data

    def back(g):
        return np.matmul(g, w.data.T), np.matmul(x.data.T, g), g.sum(axis=0)

    return _make(value, (x, w, b), back)


def reshape(a, shape):
    value = a.data.reshape(shape)
    src = a.shape

    def back(g):
        return (g.reshape(src),)

    return _make(value, (a,), back)


def swapaxes(a, ax1, ax2):
    value = np.swapaxes(a.data, ax1, ax2)

    def back(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(value, (a,), back)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].ndim
    if any(t.ndim != base for t in tensors):
        raise ShapeMismatchError(
            "concat: rank mismatch " + str([t.shape for t in tensors])
        )
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(value, tuple(tensors), back)


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatchError(
            f"narrow: [{start}, {start + length}) outside extent {a.shape[axis]}"
        )
    index = (slice(None),) * axis + (slice(start, start + length),)
    value = a.data[index]

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(value, (a,), back)


def gather(a, indices, axis=0):
    """Select positions along ``axis``; duplicates accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"gather: indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeMismatchError(
            f"gather: index out of range for extent {a.shape[axis]}"
        )
    value = np.take(a.data, idx, axis=axis)
    where = (slice(None),) * axis

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, where + (idx,), g)
        return (full,)

    return _make(value, (a,), back)


def tsum(a, axis=None, keepdims=False):
    value = a.data.sum(axis=axis, keepdims=keepdims)
    value = np.asarray(value)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(value, (a,), back)


def tmean(a, axis=None, keepdims=False):
    count = a.size if axis is None else a.shape[axis]
    value = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _make(value, (a,), back)


def softmax(a, axis=-1):
    """Max-stabilized softmax; rows on ``axis`` sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - dot),)

    return _make(value, (a,), back)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatchError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    value = xhat * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * term
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return _make(value, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# non-differentiable selection


def topk_indices(scores, k):
    """Indices of the ``k`` largest scores, descending, ties to lowest index."""
    vals = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    vals = vals.reshape(-1)
    if vals.size == 0:
        raise ShapeMismatchError("topk_indices: empty score vector")
    if k < 1:
        raise ShapeMismatchError(f"topk_indices: k must be >= 1, got {k}")
    order = np.argsort(-vals, kind="stable")
    return order[: min(k, vals.size)]


# ---------------------------------------------------------------------------
# optimizer (decoupled weight decay, bias-corrected moments)


def default_decay_exempt(name):
    """Biases and norm gains are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("b", "bias", "g", "gain")


class AdamW:
    """Adaptive optimizer with decoupled weight decay.

    ``lr_for`` maps a parameter name to its learning rate (two-group
    backbone/head schedules plug in here); parameters whose ``.grad`` is
    None are skipped for the step.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, lr_for=None, decay_exempt=default_decay_exempt):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_for = lr_for or (lambda name: self.lr)
        self.decay_exempt = decay_exempt
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"optimizer: grad {g.shape} vs param {p.data.shape} for {name}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not self.decay_exempt(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr_for(name) * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.params):
            raise ShapeMismatchError("optimizer state does not match parameter set")
        self.step_count = int(state["step"])
        self.m = {k: np.array(a) for k, a in state["m"].items()}
        self.v = {k: np.array(a) for k, a in state["v"].items()}
