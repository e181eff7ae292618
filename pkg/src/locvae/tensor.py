"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the model needs are provided.  Broadcasting is limited
to a scalar operand (a Python number or a one-element tensor) and to the
per-channel bias inside the convolutions.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Gradients accumulate across calls; callers reset leaves between steps.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign() is 0 at 0, which is the subgradient convention we want
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (out * g,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def xlogx(a: Tensor) -> Tensor:
    """``x * ln x`` with ``0 * ln 0 := 0`` and zero gradient on that branch."""
    if np.any(a.data < 0):
        raise ValueError("xlogx of a negative value")
    pos = a.data > 0
    logs = np.zeros_like(a.data)
    logs[pos] = np.log(a.data[pos])

    def bw(g):
        return (np.where(pos, g * (logs + 1.0), 0.0),)

    return _make(a.data * logs, (a,), bw, "xlogx")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        axes = (axis,) if isinstance(axis, int) else axis
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.size)


def sum_per_sample(a: Tensor, exact: bool = False) -> Tensor:
    """Reduce every axis but the leading batch axis.

    ``exact=True`` rounds each sample's sum once (``math.fsum``) instead of
    accumulating rounding error over the voxels.
    """
    if not exact:
        return sum(a, axis=tuple(range(1, a.data.ndim)))
    flat = a.data.reshape(a.shape[0], -1)
    out = np.array([math.fsum(row) for row in flat])
    return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * (a.data.ndim - 1)), a.shape).copy(),), "sum_per_sample")


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def normalize_per_sample(a: Tensor) -> Tensor:
    """Scale each sample of a nonnegative field to unit sum.

    A sample that sums to zero maps to the uniform distribution, with zero
    gradient.
    """
    if np.any(a.data < 0):
        raise ValueError("normalize_per_sample expects a nonnegative field")
    n = a.shape[0]
    flat = a.data.reshape(n, -1)
    totals = np.array([math.fsum(row) for row in flat])  # correctly rounded, so a uniform field maps to exactly 1/N
    degenerate = totals <= 0
    safe = np.where(degenerate, 1.0, totals)
    p = flat / safe[:, None]
    p[degenerate] = 1.0 / flat.shape[1]

    def bw(g):
        gf = g.reshape(n, -1)
        inner = (gf * p).sum(axis=1, keepdims=True)
        ga = (gf - inner) / safe[:, None]
        ga[degenerate] = 0.0
        return (ga.reshape(a.shape),)

    return _make(p.reshape(a.shape), (a,), bw, "normalize")


# ---------------------------------------------------------------------------
# volumetric ops; activations are (N, C, D, H, W), a 4-D input is a batch of one


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 5:
        return x, False
    if x.data.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    raise ValueError(f"expected a (C, D, H, W) or (N, C, D, H, W) tensor, got {x.shape}")


def _unbatched(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    x, squeeze = _batched(x)
    if kernel.data.ndim != 5 or kernel.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {kernel.shape} does not match input channels {x.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    k = kernel.shape[2:]
    out = kernels.conv_forward(x.data, kernel.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    in_spatial = x.shape[2:]

    def bw(g):
        gx = kernels.conv_input_grad(g, kernel.data, stride, padding, in_spatial) if x.requires_grad else None
        gw = kernels.conv_weight_grad(x.data, g, stride, padding, k) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _unbatched(_make(out, parents, bw, "conv3d"), squeeze)


def conv3d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv3d``: ``kernel`` is (C_out, C_in, k, k, k) of the forward conv.

    The input carries C_out channels and the result carries C_in.  Passing an
    encoder kernel here ties the two layers; its gradient then sums both uses.
    """
    x, squeeze = _batched(x)
    if kernel.data.ndim != 5 or kernel.shape[0] != x.shape[1]:
        raise ValueError(
            f"transposed kernel {kernel.shape} expects {kernel.shape[0]} input channels, got {x.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[1]} output channels")
    k = kernel.shape[2:]
    out_spatial = tuple(kernels.transposed_extent(s, kk, stride, padding) for s, kk in zip(x.shape[2:], k))
    # the forward conv of out_spatial must land back on the input extent
    for s, o, kk in zip(x.shape[2:], out_spatial, k):
        if kernels.output_extent(o, kk, stride, padding) != s:
            raise ValueError("transposed convolution extent is not invertible")
    out = kernels.conv_input_grad(x.data, kernel.data, stride, padding, out_spatial)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = kernels.conv_forward(g, kernel.data, stride, padding) if x.requires_grad else None
        gw = kernels.conv_weight_grad(g, x.data, stride, padding, k) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _unbatched(_make(out, parents, bw, "conv3d_transpose"), squeeze)


def avg_pool3d(x: Tensor, window: int) -> Tensor:
    x, squeeze = _batched(x)
    out = kernels.avg_pool(x.data, window)
    return _unbatched(_make(out, (x,), lambda g: (kernels.avg_pool_grad(g, window),), "avg_pool3d"), squeeze)


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    x, squeeze = _batched(x)
    out = kernels.upsample(x.data, factor)
    return _unbatched(_make(out, (x,), lambda g: (kernels.upsample_grad(g, factor),), "upsample3d"), squeeze)
