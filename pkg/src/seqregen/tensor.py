"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays wrapped in :class:`Tensor` graph nodes. Operations
executed while a :class:`Tape` is active record their operands and a local
gradient rule (one vector-Jacobian product per operand); :func:`grad` then
walks the recorded nodes in exact reverse creation order.

The gradient rules are themselves written with tensor operations, so a
gradient computation can be differentiated again: pass ``create_graph=True``
to :func:`grad` and the backward pass is recorded onto the active tape.
That is what makes input-gradient penalties trainable.

Outside any tape (or under :func:`pause_recording`) operations produce
plain detached tensors — the inference path.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float32

_SEQ = itertools.count()
_STACK: list = []  # innermost active tape last; None entries pause recording

#: name -> callable, every differentiable primitive registers here so the
#: finite-difference suite can assert full coverage.
PRIMITIVES: dict = {}


def _primitive(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


class Tape:
    """Context manager that turns on gradient recording.

    Collects every parameter tensor that participates in a recorded
    operation, in first-use order, for :func:`backward`.
    """

    def __init__(self):
        self._params = []
        self._param_ids = set()

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.pop()
        assert popped is self
        return False

    def watch(self, t):
        if id(t) not in self._param_ids:
            self._param_ids.add(id(t))
            self._params.append(t)

    @property
    def params(self):
        return list(self._params)


@contextmanager
def pause_recording():
    """Temporarily disable recording (inference inside a training step)."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def recording():
    return bool(_STACK) and _STACK[-1] is not None


class Tensor:
    """A numpy array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "parents", "vjps", "param", "name", "_seq")

    def __init__(self, data, dtype=None, param=False, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.parents = ()
        self.vjps = ()
        self.param = bool(param)
        self.name = name
        self._seq = next(_SEQ)

    # --- basic introspection -------------------------------------------------

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

    @property
    def tracked(self):
        return self.param or bool(self.parents)

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.parents = ()
        t.vjps = ()
        t.param = False
        t.name = None
        t._seq = next(_SEQ)
        return t

    def __repr__(self):
        tag = " param" if self.param else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # --- operator sugar ------------------------------------------------------

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def parameter(data, name=None, dtype=None):
    """A leaf tensor that optimizers update and tapes track."""
    return Tensor(data, dtype=dtype, param=True, name=name)


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype)


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


def _node(data, parents, vjps):
    """Wrap an op result; attach graph edges only while recording."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.param = False
    out.name = None
    out._seq = next(_SEQ)
    out.parents = ()
    out.vjps = ()
    if _STACK and _STACK[-1] is not None:
        if any(p.param or p.parents for p in parents):
            out.parents = tuple(parents)
            out.vjps = tuple(vjps)
            tape = _STACK[-1]
            for p in parents:
                if p.param:
                    tape.watch(p)
    return out


# --- broadcasting helpers ----------------------------------------------------


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` (inverse of numpy broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


# --- elementwise arithmetic ---------------------------------------------------


@_primitive("add")
def add(a, b):
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


@_primitive("sub")
def sub(a, b):
    return _node(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(neg(g), b.shape)),
    )


@_primitive("mul")
def mul(a, b):
    return _node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, b), a.shape),
            lambda g: _unbroadcast(mul(g, a), b.shape),
        ),
    )


@_primitive("div")
def div(a, b):
    return _node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(div(g, b), a.shape),
            lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
    )


@_primitive("neg")
def neg(a):
    return _node(-a.data, (a,), (lambda g: neg(g),))


# --- matrix product -----------------------------------------------------------


@_primitive("matmul")
def matmul(a, b):
    """Matrix product of stacked matrices; batch dims broadcast.

    Both operands must have rank >= 2 (reshape vectors explicitly).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _node(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape),
            lambda g: _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape),
        ),
    )


# --- transcendental / nonlinear ------------------------------------------------


def _unary(data, a, vjp_from_out):
    """Single-parent node whose vjp may close over the output tensor."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.param = False
    out.name = None
    out._seq = next(_SEQ)
    out.parents = ()
    out.vjps = ()
    if recording() and (a.param or a.parents):
        out.parents = (a,)
        out.vjps = (vjp_from_out(out),)
        if a.param:
            _STACK[-1].watch(a)
    return out


@_primitive("exp")
def exp(a):
    return _unary(np.exp(a.data), a, lambda out: (lambda g: mul(g, out)))


@_primitive("log")
def log(a):
    return _unary(np.log(a.data), a, lambda out: (lambda g: div(g, a)))


@_primitive("sqrt")
def sqrt(a):
    return _unary(
        np.sqrt(a.data),
        a,
        lambda out: (lambda g: div(mul(g, constant(np.asarray(0.5, a.dtype))), out)),
    )


@_primitive("power")
def power(a, p):
    p = float(p)
    return _unary(
        a.data**p,
        a,
        lambda out: (
            lambda g: mul(g, mul(constant(np.asarray(p, a.dtype)), power(a, p - 1.0)))
        ),
    )


@_primitive("tanh")
def tanh(a):
    return _unary(
        np.tanh(a.data), a, lambda out: (lambda g: mul(g, 1.0 - mul(out, out)))
    )


@_primitive("sigmoid")
def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _unary(out, a, lambda o: (lambda g: mul(g, mul(o, 1.0 - o))))


@_primitive("softplus")
def softplus(a):
    # log(1 + e^x), evaluated stably; d/dx = sigmoid(x)
    return _unary(
        np.logaddexp(np.asarray(0.0, a.dtype), a.data),
        a,
        lambda out: (lambda g: mul(g, sigmoid(a))),
    )


@_primitive("relu")
def relu(a):
    mask = (a.data > 0).astype(a.dtype)
    return _unary(
        a.data * mask, a, lambda out: (lambda g: mul(g, constant(mask)))
    )


@_primitive("leaky_relu")
def leaky_relu(a, slope=0.2):
    scale = np.where(a.data > 0, np.asarray(1.0, a.dtype), np.asarray(slope, a.dtype))
    return _unary(
        a.data * scale, a, lambda out: (lambda g: mul(g, constant(scale)))
    )


# --- shape ops -----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_primitive("sum")
def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    kept_shape = tuple(
        1 if i in axes else s for i, s in enumerate(a.shape)
    )

    def vjp(g):
        gg = g if keepdims else reshape(g, kept_shape)
        return broadcast_to(gg, a.shape)

    return _node(data, (a,), (vjp,))


def mean_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return div(
        sum_(a, axis=axis, keepdims=keepdims),
        constant(np.asarray(float(count), a.dtype)),
    )


@_primitive("broadcast_to")
def broadcast_to(a, shape):
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    return _node(data, (a,), (lambda g: _unbroadcast(g, a.shape),))


@_primitive("reshape")
def reshape(a, shape):
    shape = tuple(shape)
    return _node(
        a.data.reshape(shape), (a,), (lambda g: reshape(g, a.shape),)
    )


@_primitive("swapaxes")
def swapaxes(a, ax1, ax2):
    return _node(
        np.swapaxes(a.data, ax1, ax2), (a,), (lambda g: swapaxes(g, ax1, ax2),)
    )


@_primitive("concat")
def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = []
    off = 0
    for t in tensors:
        offsets.append(off)
        off += t.shape[axis]

    def make_vjp(start, length):
        key = tuple(
            slice(start, start + length) if i == axis else slice(None)
            for i in range(tensors[0].ndim)
        )
        return lambda g: slice_(g, key)

    vjps = tuple(make_vjp(o, t.shape[axis]) for o, t in zip(offsets, tensors))
    return _node(data, tuple(tensors), vjps)


def _norm_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if isinstance(k, slice):
            if k.step not in (None, 1):
                raise ShapeError("slicing with a step is not supported")
        elif not isinstance(k, (int, np.integer)):
            raise ShapeError(f"unsupported index component: {k!r}")
    return key


@_primitive("slice")
def slice_(a, key):
    key = _norm_key(key)
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    return _node(data, (a,), (lambda g: unslice(g, key, a.shape),))


@_primitive("unslice")
def unslice(g, key, full_shape):
    """Scatter ``g`` into zeros of ``full_shape`` at ``key`` (adjoint of slice)."""
    key = _norm_key(key)
    data = np.zeros(full_shape, dtype=g.data.dtype)
    data[key] = g.data
    return _node(data, (g,), (lambda gg: slice_(gg, key),))


@_primitive("softmax")
def softmax(a, axis=-1):
    """Row-stabilized softmax; the shift is a constant so gradients are exact."""
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, constant(shift)))
    return div(e, sum_(e, axis=axis, keepdims=True))


# --- reverse pass ---------------------------------------------------------------


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    Returns one tensor per input (zeros for inputs the output does not
    depend on). With ``create_graph=True`` the backward computation is
    recorded, so the returned gradients are differentiable themselves.
    """
    if output.size != 1:
        raise GraphError(f"gradient target must be scalar, got shape {output.shape}")
    inputs = list(inputs)
    targets = {id(t) for t in inputs}

    # nodes reachable from output via parent edges
    nodes = []
    seen = {id(output)}
    stack = [output]
    while stack:
        n = stack.pop()
        nodes.append(n)
        for p in n.parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)

    # a node is useful if a target is reachable from it via parent edges;
    # parents always have a smaller _seq than their children
    useful = set()
    for n in sorted(nodes, key=lambda t: t._seq):
        if id(n) in targets or any(id(p) in useful for p in n.parents):
            useful.add(id(n))

    grads = {id(output): Tensor(np.ones_like(output.data))}
    results = {}
    ctx = pause_recording() if not create_graph else _keep_recording()
    with ctx:
        for n in sorted(nodes, key=lambda t: t._seq, reverse=True):
            g = grads.pop(id(n), None)
            if g is None:
                continue
            if id(n) in targets:
                results[id(n)] = g
            for p, vjp in zip(n.parents, n.vjps):
                if id(p) not in useful:
                    continue
                pg = vjp(g)
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
    return [results.get(id(t), zeros_like(t)) for t in inputs]


@contextmanager
def _keep_recording():
    yield


def backward(loss, tape):
    """Gradient map for every parameter the tape tracked.

    Parameters that the loss never touched get zero gradients.
    """
    params = tape.params
    gs = grad(loss, params)
    return {p: g for p, g in zip(params, gs)}


def assert_finite(t, where=""):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values{' in ' + where if where else ''}")
    return t
