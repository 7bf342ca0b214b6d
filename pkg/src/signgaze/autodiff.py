"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Build a graph with the ops below, call ``backward`` on a scalar root, and
every reachable tensor with ``requires_grad`` holds d(root)/d(tensor) in
``.grad``.  Gradients accumulate across backward calls until ``zero_grads``.

Conventions:
  - images are NHWC: (batch, height, width, channels)
  - conv kernels are (k, k, c_in, c_out)
  - softmax / layer_norm act along the last axis

Gradient paths into tensors that do not require gradients are skipped, so
feeding data as plain ``Tensor(value)`` leaves costs no backward work.
"""

from __future__ import annotations

import ctypes
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonScalarRoot, ShapeMismatch


def _tune_allocator():
    # Large numpy temporaries otherwise go through mmap/munmap on every
    # alloc, which page-faults each training step. Serve them from the
    # heap instead. Best effort; irrelevant off glibc.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()


class Tensor:
    """A value in the computation graph with a gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # graph construction -----------------------------------------------------

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return add(self, Tensor._lift(other))

    def __radd__(self, other):
        return add(Tensor._lift(other), self)

    def __sub__(self, other):
        return sub(self, Tensor._lift(other))

    def __rsub__(self, other):
        return sub(Tensor._lift(other), self)

    def __mul__(self, other):
        return mul(self, Tensor._lift(other))

    def __rmul__(self, other):
        return mul(Tensor._lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, Tensor._lift(other))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if tensor.grad is None:
        # copy: the incoming array may be a view or shared with a sibling
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


def _accumulate_owned(tensor: Tensor, grad: np.ndarray):
    # for backward rules that hand over a freshly computed array nobody
    # else references: adopting it skips a copy
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad += grad


def _node(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: {a.value.shape} vs {b.value.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            if a.value.shape == g.shape:
                _accumulate(a, g)
            else:
                _accumulate_owned(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            if b.value.shape == g.shape:
                _accumulate(b, g)
            else:
                _accumulate_owned(b, _unbroadcast(g, b.value.shape))

    return _node(a.value + b.value, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            if a.value.shape == g.shape:
                _accumulate(a, g)
            else:
                _accumulate_owned(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(-g, b.value.shape))

    return _node(a.value - b.value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate_owned(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(g * a.value, b.value.shape))

    return _node(a.value * b.value, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands: {a.value.shape} vs {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.value.shape} vs {b.value.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.value, -1, -2)
            _accumulate_owned(a, _unbroadcast(ga, a.value.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            _accumulate_owned(b, _unbroadcast(gb, b.value.shape))

    return _node(a.value @ b.value, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(g):
        if x.requires_grad:
            _accumulate_owned(x, g * mask)

    return _node(np.where(mask, x.value, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.value)

    def backward(g):
        if x.requires_grad:
            _accumulate_owned(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accumulate_owned(x, (g - dot) * s)

    return _node(s, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.value - mu) * inv

    def backward(g):
        if x.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accumulate_owned(x, inv * (g - gm - y * gy))

    return _node(y, (x,), backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate_owned(x, np.broadcast_to(g, x.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(x, np.broadcast_to(g, x.value.shape).copy())

    return _node(value, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.value.size if axis is None else np.prod(
        [x.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    value = x.value.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate_owned(x, np.broadcast_to(g / count, x.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(x, np.broadcast_to(g / count, x.value.shape).copy())

    return _node(value, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].value.shape)
    for t in tensors[1:]:
        other = list(t.value.shape)
        if len(other) != len(base) or any(
            i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatch(f"concat: {tensors[0].value.shape} vs {t.value.shape}")
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.value.shape))

    return _node(x.value.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.transpose(inverse))

    return _node(x.value.transpose(axes), (x,), backward)


_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(h: int, wd: int, cin: int, k: int, stride: int, padding: int) -> np.ndarray:
    """Flat gather indices turning a padded NHWC image into im2col columns
    with (ki, kj, cin) column order; cached per geometry."""
    key = (h, wd, cin, k, stride, padding)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        hp, wp = h + 2 * padding, wd + 2 * padding
        out_h = (hp - k) // stride + 1
        out_w = (wp - k) // stride + 1
        oi, oj = np.meshgrid(
            np.arange(out_h) * stride, np.arange(out_w) * stride, indexing="ij"
        )
        ki, kj, c = np.meshgrid(np.arange(k), np.arange(k), np.arange(cin), indexing="ij")
        idx = (
            (oi[:, :, None] + ki.ravel()[None, None, :]) * wp
            + (oj[:, :, None] + kj.ravel()[None, None, :])
        ) * cin + c.ravel()[None, None, :]
        idx = np.ascontiguousarray(idx.reshape(out_h * out_w, k * k * cin))
        _COL_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) on NHWC input.

    ``x`` is (B, H, W, Cin), ``w`` is (k, k, Cin, Cout); square kernel,
    equal stride both ways, symmetric zero padding.  Bias is a separate
    ``add``.  Implemented as an im2col GEMM with cached gather indices;
    the input gradient accumulates one GEMM per kernel tap to avoid
    materializing the column gradient.
    """
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.value.shape}, kernel {w.value.shape}")
    k = w.value.shape[0]
    if w.value.shape[1] != k:
        raise ShapeMismatch(f"conv2d kernel must be square, got {w.value.shape}")
    if x.value.shape[3] != w.value.shape[2]:
        raise ShapeMismatch(
            f"conv2d channels: input {x.value.shape} vs kernel {w.value.shape}"
        )
    batch, h, wd, cin = x.value.shape
    cout = w.value.shape[3]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(
            f"conv2d: kernel {w.value.shape} does not fit input {x.value.shape}"
        )

    if padding:
        xp = np.zeros((batch, h + 2 * padding, wd + 2 * padding, cin))
        xp[:, padding : padding + h, padding : padding + wd, :] = x.value
    else:
        xp = np.ascontiguousarray(x.value)
    idx = _col_indices(h, wd, cin, k, stride, padding)
    cols = np.take(xp.reshape(batch, -1), idx.reshape(-1), axis=1).reshape(
        batch * out_h * out_w, k * k * cin
    )
    value = (cols @ w.value.reshape(-1, cout)).reshape(batch, out_h, out_w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (cols.T @ g2).reshape(w.value.shape))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    tap = (g2 @ w.value[ki, kj].T).reshape(batch, out_h, out_w, cin)
                    gxp[
                        :,
                        ki : ki + stride * out_h : stride,
                        kj : kj + stride * out_w : stride,
                        :,
                    ] += tap
            if padding:
                _accumulate_owned(x, gxp[:, padding : padding + h, padding : padding + wd, :])
            else:
                _accumulate_owned(x, gxp)

    return _node(value, (x, w), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor):
    """Propagate gradients from a scalar root through the whole graph.

    Leaf tensors (parameters, inputs) keep their ``.grad`` buffers, and
    repeated calls accumulate into them; use ``zero_grads`` between
    optimization steps.  Interior-node grads are consumed and released as
    the pass walks the graph.
    """
    if root.value.size != 1:
        raise NonScalarRoot(f"backward root has shape {root.value.shape}")

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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    _accumulate(root, np.ones_like(root.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior grads are per-pass; leaves accumulate


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
