"""Dense arrays with reverse-mode differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and,
when gradient tracking is on, records the parents it was computed from plus a
closure that pushes its gradient back to them.  :meth:`Tensor.backward` walks
the recorded graph in reverse topological order.

Binary operations follow numpy's trailing-axis broadcasting; the gradient of a
broadcast operand is summed back to its own shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "ConfigError",
    "ShapeError",
    "Tensor",
    "Parameter",
    "as_tensor",
    "get_dtype",
    "set_precision",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "sigmoid",
    "gelu",
    "softplus",
    "absolute",
    "maximum",
    "minimum",
    "softmax",
    "concat",
    "pad2d",
    "straight_through",
    "elementwise",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """A configuration value makes the requested computation impossible."""


_DTYPES = {32: np.float32, 64: np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(bits: int) -> None:
    """Set the run-wide floating point width (32 or 64)."""
    if bits not in _DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {bits!r}")
    _state["dtype"] = _DTYPES[bits]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(bits: int):
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional real array that can take part in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "__weakref__")

    # numpy must defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else get_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype) if arr.dtype != dtype else arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward: Callable[[], None] | None = None

    # construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward = None
        out._prev = ()
        out.requires_grad = False
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = lambda: backward(out.grad)
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # array protocol -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # autodiff -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        seed = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.array(seed, copy=True)
        else:
            self.grad += seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # intermediate gradients are not part of the contract
        for node in order:
            if node._backward is not None:
                node.grad = None

    # operators ------------------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """A trainable leaf: a value plus a zero-initialised gradient of equal shape."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_dtype(), copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))


def _pair(a, b):
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        a._accum(g)
        b._accum(g)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        a._accum(g)
        b._accum(-g)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * out / b.data)

    return Tensor._result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: a._accum(-g))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; ``a`` may carry leading batch axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)))


def _has_array_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def getitem(a: Tensor, idx) -> Tensor:
    fancy = _has_array_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accum(full)

    return Tensor._result(np.asarray(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(part)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad2d(a: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes on the bottom/right edges."""
    if bottom == 0 and right == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(0, bottom), (0, right)]
    h, w = a.shape[-2:]
    return Tensor._result(np.pad(a.data, width), (a,), lambda g: a._accum(g[..., :h, :w]))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: a._accum(g * out))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return Tensor._result(out, (a,), lambda g: a._accum(g * out * (1 - out)))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))

    def backward(g):
        a._accum(g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)))

    return Tensor._result((x * cdf).astype(x.dtype, copy=False), (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data)
    return Tensor._result(out, (a,), lambda g: a._accum(g * special.expit(a.data)))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: a._accum(g * np.sign(a.data)))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data

    def backward(g):
        a._accum(g * take_a)
        b._accum(g * ~take_a)

    return Tensor._result(np.where(take_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g):
        a._accum(g * take_a)
        b._accum(g * ~take_a)

    return Tensor._result(np.where(take_a, a.data, b.data), (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (a,), backward)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard``, gradient routed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return Tensor._result(hard.copy(), (soft,), lambda g: soft._accum(g))


_UNARY = {"exp": exp, "sigmoid": sigmoid, "gelu": gelu, "softplus": softplus}
_BINARY = {"add": add, "mul": mul}


def elementwise(x, f: str, y=None) -> Tensor:
    """Apply a named elementwise function; binary forms need equal shapes."""
    if f in _UNARY:
        return _UNARY[f](x)
    if f in _BINARY:
        x, y = as_tensor(x), as_tensor(y)
        if x.shape != y.shape:
            raise ShapeError(f"{f}: operand shapes differ, {x.shape} vs {y.shape}")
        return _BINARY[f](x, y)
    raise ConfigError(f"unknown elementwise function {f!r}")


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if isinstance(t, Parameter)]
