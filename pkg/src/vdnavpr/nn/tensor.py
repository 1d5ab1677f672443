"""Reverse-mode autodiff over float64 numpy arrays.

Deliberately small: only the operations the histogram encoder needs
(1-D convolution, matmul, bias add, ReLU, reshape/concat/gather,
reductions, and L2 normalization). Graphs are recorded only when an
input requires gradients, so inference pays no tape overhead.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import GraphError, ShapeError

NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded graph."""
        if self._backward_fn is None and not self._parents:
            raise GraphError("backward called with no recorded forward pass")
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # Operator sugar used by the loss code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        start = 0
        for t, size in zip(ts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            _accumulate(t, g[tuple(index)])
            start += size

    return _make(data, ts, backward)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; slices with norm below
    ``eps`` become the zero vector (documented epsilon rule)."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = norms >= eps
    denom = np.where(safe, norms, 1.0)
    data = np.where(safe, x.data / denom, 0.0)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        gx = np.where(safe, (g - data * dot) / denom, 0.0)
        _accumulate(x, gx)

    return _make(data, (x,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis.

    ``x`` is ``(batch, c_in, length)`` or ``(c_in, length)``; ``weight`` is
    ``(c_out, c_in, kernel)``. Output length is
    ``(length + 2*padding - kernel) // stride + 1`` and must be >= 1.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    squeeze = x.ndim == 2
    if squeeze:
        x3 = reshape(x, (1,) + x.shape)
    else:
        x3 = x
    if x3.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input/weight, got {x.shape} and {weight.shape}")
    batch, c_in, length = x3.shape
    c_out, c_in_w, kernel = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
    length_out = (length + 2 * padding - kernel) // stride + 1
    if length + 2 * padding < kernel or length_out < 1:
        raise ShapeError(
            f"conv1d output length {length_out} < 1 for length={length}, kernel={kernel}, "
            f"stride={stride}, padding={padding}"
        )

    xd = x3.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    cols = np.empty((batch, c_in, length_out, kernel))
    for k in range(kernel):
        cols[:, :, :, k] = xd[:, :, k : k + stride * length_out : stride]
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2]))  # (batch, length_out, c_out)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        # g: (batch, c_out, length_out)
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # (c_out, c_in, kernel)
            _accumulate(weight, gw)
        if x3.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (batch, length_out, c_in, kernel)
            dcols = dcols.transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xd)
            for k in range(kernel):
                gxp[:, :, k : k + stride * length_out : stride] += dcols[:, :, :, k]
            gx = gxp[:, :, padding : padding + length] if padding else gxp
            _accumulate(x3, gx)

    result = _make(out, (x3, weight), backward)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
        result = add(result, reshape(bias, (1, c_out, 1)))
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out
