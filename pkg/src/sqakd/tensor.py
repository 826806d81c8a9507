"""Dense tensors with reverse-mode automatic differentiation.

Scalars are float32 by default; float64 is available for gradient checks.
The graph is define-by-run: every forward pass records fresh backward
closures, and ``Tape`` replays them in reverse topological order. Ops that
need a hand-written derivative (the quantizer round functions) are built with
``custom_grad_op``, which bypasses the chain rule through the forward body.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Validate that every op output is finite (slow; for debugging)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """n-dimensional array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> "Tape":
        """Run reverse-mode accumulation from this tensor; returns the tape."""
        tape = Tape.trace(self)
        tape.run_backward(self, grad)
        return tape

    def assert_finite(self, context: str = "") -> None:
        if not np.all(np.isfinite(self.data)):
            from .errors import NumericError

            raise NumericError(f"non-finite tensor values{': ' + context if context else ''}")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic conveniences; scalar operands go through the *_scalar ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of the ops reaching a root tensor.

    ``nodes`` lists every recorded tensor with inputs before the ops that
    consume them; ``run_backward`` walks it once in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, root: Tensor, grad=None) -> None:
        if grad is None:
            if root.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(root.data)
        else:
            grad = np.asarray(grad, dtype=root.data.dtype)
            if grad.shape != root.data.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != root shape {root.data.shape}")
        root.grad = grad if root.grad is None else root.grad + grad
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise DimensionError(
                        f"backward produced gradient of shape {g.shape} for input of shape {parent.data.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g


def _from_op(data, parents, backward):
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if _FINITE_CHECKS:
        out.assert_finite("op output")
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed tensor dtypes in one op: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-axis bias vector for ``b``."""
    _check_same_dtype(a, b)
    if a.shape == b.shape:

        def backward(g):
            return g, g

        return _from_op(a.data + b.data, (a, b), backward)
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))

        def backward(g):
            return g, g.sum(axis=axes)

        return _from_op(a.data + b.data, (a, b), backward)
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _from_op(a.data + a.data.dtype.type(c), (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape} elementwise")

    def backward(g):
        return g * b.data, g * a.data

    return _from_op(a.data * b.data, (a, b), backward)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(a.data @ b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, a.data.dtype.type(0)), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return _from_op(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(in_shape),)

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None) -> Tensor:
    if axis is not None and a.data.shape[axis] == 0:
        raise DimensionError("reduction over an empty axis")

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).astype(a.data.dtype, copy=True),)

    return _from_op(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return mul_scalar(sum_(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# softmax family (max-subtracted for stability)


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    y = _softmax_data(a.data, axis)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _from_op(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    out_data = _log_softmax_data(a.data, axis)
    sm = np.exp(out_data)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution (kernel backend selected in sqakd.kernels)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    from . import kernels

    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x[N,C,H,W] and w[F,C,kh,kw]")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    if bias is not None:
        _check_same_dtype(x, bias)
        if bias.data.shape != (f,):
            raise DimensionError(f"conv2d bias must have shape ({f},), got {bias.data.shape}")

    x_data = np.ascontiguousarray(x.data)
    w_data = np.ascontiguousarray(w.data)
    y = kernels.conv2d_forward(x_data, w_data, stride, padding)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, w_data, x_data.shape, stride, padding)
        gw = kernels.conv2d_backward_weight(g, x_data, w_data.shape, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _from_op(y, parents, backward)


# ---------------------------------------------------------------------------
# custom-gradient hook


def custom_grad_op(forward, backward):
    """Build an op whose backward rule replaces the chain rule entirely.

    ``forward(*arrays) -> array`` computes the output from the input arrays.
    ``backward(grad_out, inputs, output) -> array | tuple`` receives the
    upstream gradient plus every saved forward value and must return one
    gradient per input (``None`` to skip). Shapes are validated against the
    inputs; no differentiation happens through ``forward``'s internals.
    """

    def op(*tensors):
        arrays = tuple(t.data for t in tensors)
        out_data = forward(*arrays)

        def _backward(g):
            grads = backward(g, arrays, out_data)
            if not isinstance(grads, tuple):
                grads = (grads,)
            if len(grads) != len(tensors):
                raise DimensionError(f"custom backward returned {len(grads)} gradients for {len(tensors)} inputs")
            return grads

        return _from_op(out_data, tensors, _backward)

    return op
