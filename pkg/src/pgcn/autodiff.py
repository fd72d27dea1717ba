"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the PGCN forward pass needs are provided. Every operation
records its parents and a closure mapping the output gradient to one gradient
per parent; :func:`backward` replays those closures in reverse topological
order and accumulates fan-out contributions additively.
"""
from contextlib import contextmanager

import numpy as np

from ._accel import kernels

__all__ = [
    "DimensionError", "NumericDomainError", "LengthError", "DeterminismError",
    "Tensor", "Parameter", "no_grad", "as_tensor",
    "matmul", "add", "sub", "hadamard", "scale", "relu", "tanh", "sigmoid",
    "activation", "absolute", "row_softmax", "gated", "tsum", "mean",
    "reshape", "transpose", "crop", "pad_left", "dilated_causal_conv1d",
    "backward", "grad_check",
]


class DimensionError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class LengthError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable-by-convention dense array plus its place on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Learnable tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def hadamard(a, b):
    """Elementwise product; ``b`` may broadcast over leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes.

    >>> matmul(Tensor(np.eye(2)), Tensor([[1., 2.], [3., 4.]])).data
    array([[1., 2.],
           [3., 4.]])
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _check_finite(x, opname):
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError(f"{opname}: non-finite input")


def relu(a):
    mask = a.data > 0.0  # subgradient at exactly 0 is 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def activation(a, kind):
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected relu, tanh or sigmoid") from None
    return fn(a)


def absolute(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def row_softmax(a):
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    _check_finite(a, "row_softmax")
    y = kernels.softmax(a.data)
    return _make(y, (a,), lambda g: (kernels.softmax_backward(y, np.ascontiguousarray(g)),))


def gated(a, b):
    """Fused ``tanh(a) * sigmoid(b)``."""
    if a.shape != b.shape:
        raise DimensionError(f"gated: shapes {a.shape} and {b.shape} differ")
    h, t, s = kernels.gated_forward(a.data, b.data)

    def bw(g):
        return kernels.gated_backward(t, s, g)

    return _make(h, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def tsum(a):
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    return scale(tsum(a), 1.0 / a.data.size)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    orig = a.shape
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def crop(a, axis, start, stop=None):
    """Basic slice ``start:stop`` along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bw)


def pad_left(a, axis, n):
    """Prepend ``n`` zeros along ``axis``."""
    if n <= 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (n, 0)
    index = [slice(None)] * a.ndim
    index[axis] = slice(n, None)
    index = tuple(index)
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# temporal convolution
# ---------------------------------------------------------------------------

def dilated_causal_conv1d(x, kernel, dilation):
    """Valid-mode dilated causal convolution along the second-to-last axis.

    ``x`` has shape ``(..., T, C)`` and ``kernel`` shape ``(P, C, D)``. Output
    position ``t`` is aligned with input position ``t + dilation*(P-1)`` and
    equals ``sum_p x[t + dilation*(P-1) - dilation*p] @ kernel[p]``: tap 0
    multiplies the current step, tap ``p`` the step ``dilation*p`` back.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim < 2:
        raise DimensionError(f"conv: expected x (..., T, C) and kernel (P, C, D), got {x.shape} and {kernel.shape}")
    if dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    P, C, D = kernel.shape
    if x.shape[-1] != C:
        raise DimensionError(f"conv: input channels {x.shape[-1]} do not match kernel {kernel.shape}")
    T = x.shape[-2]
    need = dilation * (P - 1) + 1
    if T < need:
        raise LengthError(f"conv: window of length {T} is too short; at least {need} steps required")
    lead = x.shape[:-2]
    x3 = x.data.reshape(-1, T, C)
    out = kernels.conv_forward(x3, kernel.data, dilation)
    t_out = out.shape[1]

    def bw(g):
        dx, dw = kernels.conv_backward(x3, kernel.data, dilation, np.ascontiguousarray(g).reshape(-1, t_out, D))
        return dx.reshape(x.shape), dw

    return _make(out.reshape(lead + (t_out, D)), (x, kernel), bw)


# ---------------------------------------------------------------------------
# reverse accumulation
# ---------------------------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Fill ``.grad`` on every leaf reachable from the scalar ``loss``.

    Parameter gradients accumulate into their existing buffers; call
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter):
                node.grad = node.grad + g
            else:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(forward, params, eps=1e-5):
    """Largest relative gap between tape gradients and central differences.

    ``forward`` is a zero-argument callable returning a scalar Tensor built
    from ``params``. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    first = forward().item()
    if forward().item() != first:
        raise DeterminismError("forward returned different values on identical parameters")
    for p in params:
        p.zero_grad()
    backward(forward())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = forward().item()
            flat[i] = orig - eps
            f_minus = forward().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
