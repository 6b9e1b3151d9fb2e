"""Reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` when at least
one input is itself on that tape; outside a tape they only compute
values.  Leaves are parameters pulled from a :class:`ParamStore` with
:meth:`ParamStore.var`.  Typical use::

    with Tape():
        loss = model_loss(params)
    backward(loss, params)

Shapes never broadcast implicitly; use :func:`broadcast_to` for
bias-style additions.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericalError, UsageError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "backward", "param")

    def __init__(self, inputs, backward, param=None):
        self.inputs = inputs
        self.backward = backward
        self.param = param


class Tape:
    """Append-only record of one forward pass.

    Recording order is a topological order, so the backward sweep simply
    walks the list in reverse.  The tape is consumed by :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[tuple[int, str], Tensor] = {}
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _push(self, node: _Node) -> int:
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        self.nodes.append(node)
        return len(self.nodes) - 1


class Tensor:
    """Dense float64 array, optionally bound to a node of a tape."""

    __slots__ = ("data", "_tape", "_idx")
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self._tape = None
        self._idx = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))  # raises for non-scalars

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        taped = ", taped" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{taped})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._tape = None
    out._idx = -1
    tape = _active_tape()
    if tape is not None:
        refs = [t._idx if t._tape is tape else -1 for t in inputs]
        if any(r >= 0 for r in refs):
            out._tape = tape
            out._idx = tape._push(_Node(refs, backward_fn))
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a: Tensor, c: float) -> Tensor:
    """``max(a, c)`` elementwise; ties take the flat side (zero derivative)."""
    mask = a.data > c
    return _make(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    return maximum(a, 0.0)


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ConfigurationError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    in_shape = a.shape
    return _make(out, (a,), lambda g: (g.reshape(in_shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Rank-preserving expansion of singleton axes."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ConfigurationError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True) if axes else g,),
    )


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    in_shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(in_shape, float(g)),))
    out = a.data.sum(axis=axis)
    return _make(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), in_shape).copy(),)
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise ConfigurationError(f"take: index {index} out of range for axis of size {a.shape[axis]}")
    in_shape = a.shape
    out = np.take(a.data, index, axis=axis)

    def back(g):
        full = np.zeros(in_shape)
        sl = [slice(None)] * len(in_shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ranks = {t.ndim for t in tensors}
    if len(ranks) != 1:
        raise ConfigurationError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ConfigurationError(f"concat: shape mismatch {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# op-kind table used by forward_op
OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "square": square,
    "exp": exp,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": abs_,
    "max": maximum,
    "relu": relu,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "sum": sum_,
    "mean": mean,
    "slice": take,
    "concat": lambda *ts, axis=0: concat(ts, axis),
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply op ``kind`` by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise UsageError(f"unknown op kind {kind!r}") from None
    args = [as_tensor(x) if not isinstance(x, (int, float)) else x for x in inputs]
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# Parameters and backward
# ---------------------------------------------------------------------------


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)


class ParamStore:
    """Ordered name -> (value, gradient) map; the unit of optimization."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Param] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._params[name] = Param(np.array(value, dtype=np.float64))

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> np.ndarray:
        return self._params[name].value

    def __setitem__(self, name, value):
        p = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ConfigurationError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value = value.copy()

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name) -> np.ndarray:
        return self._params[name].grad

    def items(self):
        return ((n, p.value) for n, p in self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        return ParamStore({n: p.value for n, p in self._params.items()})

    def size(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))

    def var(self, name: str) -> Tensor:
        """Parameter as a tensor, registered as a leaf on the active tape."""
        p = self._params[name]
        tape = _active_tape()
        if tape is None:
            return Tensor(p.value)
        key = (id(self), name)
        leaf = tape._leaves.get(key)
        if leaf is None:
            leaf = Tensor(p.value)
            leaf._tape = tape
            leaf._idx = tape._push(_Node((), None, param=(self, name)))
            tape._leaves[key] = leaf
        return leaf


def backward(loss: Tensor, params: ParamStore) -> None:
    """Store ``d loss / d param`` in every gradient slot of ``params``.

    Slots of parameters that do not influence ``loss`` are zeroed.  The
    tape that produced ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    params.zero_grad()
    tape = loss._tape
    if tape is None:
        return
    if tape.consumed:
        raise UsageError("tape already consumed by backward()")
    nodes = tape.nodes
    grads: list = [None] * (loss._idx + 1)
    grads[loss._idx] = np.ones_like(loss.data)
    for i in range(loss._idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        node = nodes[i]
        if node.param is not None:
            store, name = node.param
            if store is params:
                params.grad(name)[...] += g
            continue
        for ref, ig in zip(node.inputs, node.backward(g)):
            if ref >= 0 and ig is not None:
                grads[ref] = ig if grads[ref] is None else grads[ref] + ig
    tape.consumed = True
    tape.nodes = []
    tape._leaves = {}


def value_and_grad(fn: Callable[[ParamStore], Tensor], params: ParamStore) -> float:
    """Evaluate ``fn`` on a fresh tape, backpropagate, return the scalar value."""
    with Tape():
        loss = fn(params)
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise UsageError(f"expected a scalar, got shape {loss.shape}")
    backward(loss, params)
    return float(loss.data.reshape(()))


def finite_difference_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
                            step: float = 1e-6) -> float:
    """Largest relative deviation between taped and central-difference gradients.

    Returns ``max |analytic - fd| / (|fd| + 1e-12)`` over all parameter
    entries.  Parameter values are restored afterwards.
    """
    if not step > 0:
        raise UsageError("step must be positive")
    value_and_grad(f, params)
    worst = 0.0
    for name in params.names():
        value = params[name]
        analytic = params.grad(name).copy()
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + step
            fp = float(as_tensor(f(params)).data.reshape(()))
            value[idx] = orig - step
            fm = float(as_tensor(f(params)).data.reshape(()))
            value[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite function value while perturbing {name}{list(idx)}")
            fd = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(analytic[idx] - fd) / (abs(fd) + 1e-12))
    params.zero_grad()
    return worst
