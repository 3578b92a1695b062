"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation whose output needs a gradient allocates one tape node and
bumps a global counter.  The zero-order controller relies on that counter
staying flat, so anything that should be "tape free" must run with
``requires_grad=False`` inputs or inside :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import itertools
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "GradientMap",
    "tensor",
    "backward",
    "no_grad",
    "grad_enabled",
    "tape_allocations",
    "count_allocations",
    "allow_nonfinite",
    "matmul",
    "softmax",
    "sq_l2_distance",
    "concat",
    "stack",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "silu",
    "normalize",
    "upsample_nearest",
]


class _TapeState:
    def __init__(self):
        self.enabled = True
        self.allocations = 0
        self.check_finite = True
        self.ids = itertools.count(1)


_TAPE = _TapeState()


def grad_enabled() -> bool:
    return _TAPE.enabled


def tape_allocations() -> int:
    """Total number of tape nodes allocated by this process so far."""
    return _TAPE.allocations


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class _Counter:
    def __init__(self):
        self.start = _TAPE.allocations
        self.stop = None

    @property
    def count(self) -> int:
        end = _TAPE.allocations if self.stop is None else self.stop
        return end - self.start


@contextlib.contextmanager
def count_allocations():
    """Measure tape nodes allocated inside the block: ``with count_allocations() as c: ...; c.count``."""
    counter = _Counter()
    try:
        yield counter
    finally:
        counter.stop = _TAPE.allocations


@contextlib.contextmanager
def allow_nonfinite():
    """Debugging escape hatch: let NaN/Inf through tensor construction."""
    prev = _TAPE.check_finite
    _TAPE.check_finite = False
    try:
        yield
    finally:
        _TAPE.check_finite = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Immutable float64 array that may participate in the gradient tape.

    ``tape_id`` is assigned only when the tensor is a tape node (a
    ``requires_grad`` leaf or the output of a recorded operation).
    """

    __slots__ = ("data", "requires_grad", "tape_id", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and _parents:
            arr = data  # fresh op output, no copy needed
        else:
            arr = np.array(data, dtype=np.float64)
        if _TAPE.check_finite and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad) and _TAPE.enabled
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        if self.requires_grad:
            _TAPE.allocations += 1
            self.tape_id = next(_TAPE.ids)
        else:
            self.tape_id = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(_as_tensor(other), self, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(_as_tensor(other), self, np.divide, lambda g, a, b: g / b,
                       lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        x = self.data
        return _unary(self, x**p, lambda g: g * p * x ** (p - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __getitem__(self, index):
        x = self.data
        out = x[index]

        def back(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return full

        return _unary(self, out, back)

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape)

        return _unary(self, out, back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(old))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inverse))

    @property
    def T(self):
        return self.transpose()

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)


TensorLike = "Tensor | np.ndarray | float"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _TAPE.enabled and any(p.requires_grad for p in parents)
    if not needs:
        return _fresh(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _fresh(data) -> Tensor:
    """Wrap a newly computed array without copying it."""
    t = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if _TAPE.check_finite and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    t.data = arr
    t.requires_grad = False
    t.tape_id = None
    t._parents = ()
    t._backward = None
    return t


def _unary(x: Tensor, out: np.ndarray, grad_fn: Callable) -> Tensor:
    return _record(out, (x,), lambda g: (grad_fn(g),))


def _binary(a, b, fn, grad_a, grad_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        out = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        # constant operands get no gradient, which skips their broadcast reductions
        ga = _unbroadcast(grad_a(g, ad, bd), ad.shape) if need_a else None
        gb = _unbroadcast(grad_b(g, ad, bd), bd.shape) if need_b else None
        return ga, gb

    return _record(out, (a, b), back)


# -- elementwise functions ---------------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x: Tensor) -> Tensor:
    d = x.data
    return _unary(x, np.log(d), lambda g: g / d)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _unary(x, out, lambda g: g * 0.5 / out)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def sigmoid(x: Tensor) -> Tensor:
    # exp form keeps tiny positive values where the tanh form rounds to exactly 0 or 1
    e = np.exp(-np.abs(x.data))
    r = 1.0 / (1.0 + e)
    out = np.where(x.data >= 0, r, e * r)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def silu(x: Tensor) -> Tensor:
    d = x.data
    with np.errstate(over="ignore"):
        s = np.exp(-d)  # +inf for very negative inputs, which gives s = 0 below
    s += 1.0
    np.reciprocal(s, out=s)

    def back(g):
        # s * (1 + d * (1 - s)), built in place
        out = 1.0 - s
        out *= d
        out += 1.0
        out *= s
        out *= g
        return out

    return _unary(x, d * s, back)


# -- structured operations ---------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if need_b else None
        return ga, gb

    return _record(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-D ``w`` as one tape node; leading axes of ``x`` are batch axes."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear needs x[..., {w.shape[0] if w.ndim else '?'}] and a 2-D weight, got {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = np.matmul(xd, wd)
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (wd.shape[1],):
            raise ShapeError(f"linear bias {b.shape} does not match output width {wd.shape[1]}")
        out += b.data
        parents = (x, w, b)
    need = [p.requires_grad for p in parents]

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = np.matmul(g, wd.T) if need[0] else None
        gw = xd.reshape(-1, wd.shape[0]).T @ g2 if need[1] else None
        if len(parents) == 2:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if need[2] else None)

    return _record(out, parents, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _unary(x, out, back)


def sq_l2_distance(a, b) -> Tensor:
    """Sum of squared differences; a scalar tensor."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.array(np.dot(diff.ravel(), diff.ravel()))
    return _record(out, (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff))


def normalize(x: Tensor, axis=None) -> Tensor:
    """Scale to unit L2 norm (over ``axis``, or the whole tensor)."""
    norm = sqrt((x * x).sum(axis=axis, keepdims=axis is not None))
    if np.any(norm.data == 0.0):
        raise ContractError("cannot normalize a zero vector")
    return x / norm


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps) * gain`` as a single tape node."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.einsum("...i,...i->...", xd, xd)[..., None] / xd.shape[-1] + eps)
    xn = xd * r
    need_x, need_g = x.requires_grad, gain.requires_grad

    def back(g):
        gx = gg = None
        if need_x:
            h = g * gd
            gx = xn * (np.einsum("...i,...i->...", h, xn)[..., None] / xd.shape[-1])
            np.subtract(h, gx, out=gx)
            gx *= r
        if need_g:
            gg = _unbroadcast(g * xn, gd.shape)
        return gx, gg

    return _record(xn * gd, (x, gain), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tensors, back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    d = x.data
    out = np.repeat(np.repeat(d, factor, axis=-2), factor, axis=-1)
    h, w = d.shape[-2:]

    def back(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return g.sum(axis=(-3, -1))

    return _unary(x, out, back)


# -- reverse pass ----------------------------------------------------------------
class GradientMap(dict):
    """Gradients keyed by tape id; also indexable by the leaf tensor itself."""

    def _key(self, key):
        return key.tape_id if isinstance(key, Tensor) else key

    def __getitem__(self, key):
        return dict.__getitem__(self, self._key(key))

    def __contains__(self, key):
        return dict.__contains__(self, self._key(key))

    def get(self, key, default=None):
        return dict.get(self, self._key(key), default)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every leaf on its tape.

    Leaves listed in ``wrt`` that the loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        warnings.warn("loss is not on the tape; returning an empty gradient map", RuntimeWarning)
        for leaf in wrt or ():
            if leaf.tape_id is not None:
                grads[leaf.tape_id] = Tensor(np.zeros(leaf.shape))
        return grads
    order = _topo_order(loss)
    acc = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            grads[node.tape_id] = Tensor(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + pg
            else:
                acc[key] = pg
    for leaf in wrt or ():
        if leaf.tape_id is not None and leaf.tape_id not in grads:
            grads[leaf.tape_id] = Tensor(np.zeros(leaf.shape))
    return grads


def grad(fn: Callable[..., Tensor], *args: np.ndarray) -> list:
    """Convenience: gradients of ``fn(*leaves)`` w.r.t. each numpy argument."""
    leaves = [Tensor(a, requires_grad=True) for a in args]
    gmap = backward(fn(*leaves), wrt=leaves)
    return [gmap[leaf].data for leaf in leaves]


def as_arrays(params: Mapping[str, Tensor]) -> dict:
    return {k: v.data for k, v in params.items()}
