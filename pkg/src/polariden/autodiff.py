"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` always compute their value.  They are recorded
only when at least one input lives on a :class:`Tape`; untracked tensors are
plain constants, so the same model code serves inference and training::

    tape = Tape()
    w = tape.variable(np.ones(3))
    loss = ad.sum(ad.tanh(w * 2.0))
    (gw,) = tape.gradient(loss, [w])
"""

import numpy as np

from .errors import InvalidInputError, NumericGuardError


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, name=None):
        t = Tensor(np.array(value, dtype=float), name=name)
        self._record(t, (), None)
        return t

    def _record(self, tensor, parents, vjp):
        tensor.tape = self
        tensor.index = len(self.nodes)
        tensor.parents = parents
        tensor.vjp = vjp
        self.nodes.append(tensor)

    def gradient(self, root, wrt):
        """Gradients of scalar ``root`` w.r.t. each tensor in ``wrt``.

        Tensors that do not influence ``root`` get zero arrays.
        """
        if root.tape is not self:
            raise InvalidInputError("root was not recorded on this tape")
        if np.size(root.value) != 1:
            raise InvalidInputError("gradient needs a scalar root")
        grads = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                if parent.index >= node.index:
                    raise RuntimeError("tape cycle: parent recorded after child")
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        out = []
        for t in wrt:
            g = grads.get(t.index) if t.tape is self else None
            out.append(np.zeros_like(t.value) if g is None else np.asarray(g, dtype=float))
        return out


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, value, name=None):
        self.value = value
        self.tape = None
        self.index = -1
        self.parents = ()
        self.vjp = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        tag = f" on tape#{self.index}" if self.tracked else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=float))


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _make(value, parents, vjp):
    out = Tensor(value)
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise InvalidInputError("inputs recorded on different tapes")
            tape = p.tape
    if tape is not None:
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise NumericGuardError("log of a non-positive value")
    return _make(np.log(av), (a,), lambda g: (g / av,))


# -- activations --------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    av = a.value
    sig = np.exp(-np.logaddexp(0.0, -av))
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * sig,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def minsum(a, b):
    """``sign(a) sign(b) min(|a|, |b|)`` with ``sign(0) = +1``.

    Subgradient: w.r.t. the smaller-magnitude input it is the sign of the
    other input, zero w.r.t. the larger one; ties go to ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    sa = np.where(av >= 0, 1.0, -1.0)
    sb = np.where(bv >= 0, 1.0, -1.0)
    pick_a = np.abs(av) <= np.abs(bv)
    out = sa * sb * np.where(pick_a, np.abs(av), np.abs(bv))

    def vjp(g):
        ga = np.where(pick_a, g * sb, 0.0)
        gb = np.where(pick_a, 0.0, g * sa)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), vjp)


def ste_binarize(f_pro, p_u):
    """``1.0`` where ``f_pro > p_u`` else ``0.0``; backward is the identity."""
    f_pro = as_tensor(f_pro)
    out = (f_pro.value > value_of(p_u)).astype(float)
    return _make(out, (f_pro,), lambda g: (_unbroadcast(g, f_pro.shape),))


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim != 2:
        raise InvalidInputError("matmul expects a 2-D right operand")

    def vjp(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes_ = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes_)
    return _make(np.transpose(a.value, axes_), (a,), lambda g: (np.transpose(g, inv),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def getitem(a, key):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), vjp)


def take(a, indices, axis, unique=False):
    """``np.take`` along one axis; backward scatters with accumulation.

    ``unique=True`` promises distinct 1-D indices and uses plain assignment.
    """
    a = as_tensor(a)
    indices = np.asarray(indices)
    shape = a.shape

    ax = axis % len(shape)
    k = indices.ndim

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        g = np.moveaxis(g, list(range(ax, ax + k)), list(range(k)))
        if unique:
            moved[indices] = g
        else:
            np.add.at(moved, indices, g)
        return (out,)

    return _make(np.take(a.value, indices, axis=axis), (a,), vjp)


def permute(a, order, axis=-1):
    """``a`` reindexed by the permutation ``order`` along ``axis``."""
    a = as_tensor(a)
    order = np.asarray(order)
    inverse = np.argsort(order)
    return _make(np.take(a.value, order, axis=axis), (a,),
                 lambda g: (np.take(g, inverse, axis=axis),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), vjp)


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp", "log", "relu",
    "tanh", "sigmoid", "softplus", "clip", "minsum", "ste_binarize", "matmul", "reshape",
    "transpose", "sum", "mean", "getitem", "take", "permute", "concat", "stack",
)
