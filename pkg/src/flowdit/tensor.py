"""Dense tensors with reverse-mode automatic differentiation.

Numpy holds the buffers and does the arithmetic; this module owns the graph.
Tensors are row-major and dense, float32 by default with float64 available
for gradient checking. Graph construction is single-threaded; backward()
walks the recorded ops once in reverse topological order and accumulates
gradients additively (the caller zeroes between optimizer steps).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used by samplers/eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()

    # --- introspection ---

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # --- graph plumbing ---

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._backward = backward_fn if tracked else None
        out._parents = tuple(parents) if tracked else ()
        return out

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is a freshly allocated array nothing else holds,
        # letting the first accumulation adopt it without a copy.
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate dL/dp into .grad of every requires_grad ancestor.

        Only defined for scalar (size-1) tensors; repeated calls without
        zeroing add their contributions.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        # Iterative post-order toposort; model graphs exceed the recursion limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # --- helpers ---

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(
                    f"dtype mismatch: {self.dtype} vs {other.dtype}"
                )
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def _check_broadcast(self, other: "Tensor") -> tuple:
        try:
            return np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(
                f"shapes not broadcastable: {self.shape} vs {other.shape}"
            ) from None

    # --- elementwise ---

    def add(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_broadcast(other)
        out_data = self.data + other.data
        a, b = self, other

        def backward_fn():
            g = out.grad
            if a.requires_grad:
                ga = _unbroadcast(g, a.shape)
                a._accumulate(ga, own=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.shape)
                b._accumulate(gb, own=gb is not g)

        out = Tensor._result(out_data, (a, b), backward_fn)
        return out

    def mul(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_broadcast(other)
        out_data = self.data * other.data
        a, b = self, other

        def backward_fn():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

        out = Tensor._result(out_data, (a, b), backward_fn)
        return out

    def neg(self) -> "Tensor":
        a = self

        def backward_fn():
            if a.requires_grad:
                a._accumulate(-out.grad, own=True)

        out = Tensor._result(-self.data, (a,), backward_fn)
        return out

    def sub(self, other) -> "Tensor":
        return self.add(self._coerce(other).neg())

    def scale(self, s: float) -> "Tensor":
        a = self
        s = self.dtype.type(s)

        def backward_fn():
            if a.requires_grad:
                a._accumulate(out.grad * s, own=True)

        out = Tensor._result(self.data * s, (a,), backward_fn)
        return out

    def sigmoid(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        a = self

        def backward_fn():
            if a.requires_grad:
                a._accumulate(out.grad * sig * (1.0 - sig), own=True)

        out = Tensor._result(sig.astype(self.dtype, copy=False), (a,), backward_fn)
        return out

    def silu(self) -> "Tensor":
        """x * sigmoid(x)."""
        sig = 1.0 / (1.0 + np.exp(-self.data))
        a = self

        def backward_fn():
            if a.requires_grad:
                local = sig * (1.0 + a.data * (1.0 - sig))
                a._accumulate(out.grad * local, own=True)

        out = Tensor._result((self.data * sig).astype(self.dtype, copy=False), (a,), backward_fn)
        return out

    # --- matmul ---

    def matmul(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(
                f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner extents differ: {a.shape} @ {b.shape}"
            )
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(
                f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}"
            ) from None
        out_data = np.matmul(a.data, b.data)

        def backward_fn():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape), own=True)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim >= 2:
                    # weight case: collapse batch/token dims into one GEMM
                    a2 = a.data.reshape(-1, a.shape[-1])
                    g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
                    b._accumulate(a2.T @ g2, own=True)
                else:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    b._accumulate(_unbroadcast(gb, b.shape), own=True)

        out = Tensor._result(out_data, (a, b), backward_fn)
        return out

    # --- normalizations ---

    def softmax_lastdim(self) -> "Tensor":
        if self.shape[-1] < 1:
            raise ShapeError(f"softmax needs a non-empty last dim, got {self.shape}")
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        a = self

        def backward_fn():
            if a.requires_grad:
                g = out.grad
                dot = (g * y).sum(axis=-1, keepdims=True)
                a._accumulate(y * (g - dot), own=True)

        out = Tensor._result(y.astype(self.dtype, copy=False), (a,), backward_fn)
        return out

    def rms_normalize(self, eps: float = 1e-6) -> "Tensor":
        """x / sqrt(mean(x^2, last dim) + eps)."""
        ms = np.mean(self.data * self.data, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(ms + eps)
        y = self.data * inv
        n = self.shape[-1]
        a = self

        def backward_fn():
            if a.requires_grad:
                g = out.grad
                dot = (g * y).sum(axis=-1, keepdims=True)
                a._accumulate(inv * (g - y * (dot / n)), own=True)

        out = Tensor._result(y.astype(self.dtype, copy=False), (a,), backward_fn)
        return out

    # --- reductions ---

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        a = self

        def backward_fn():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

        out = Tensor._result(np.asarray(out_data, dtype=self.dtype), (a,), backward_fn)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / count)

    # --- movement ---

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)
        a = self

        def backward_fn():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(old_shape))

        out = Tensor._result(out_data, (a,), backward_fn)
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        a = self

        def backward_fn():
            if a.requires_grad:
                a._accumulate(out.grad.transpose(inverse))

        out = Tensor._result(self.data.transpose(axes), (a,), backward_fn)
        return out

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        axis = axis % self.ndim
        if start < 0 or start + length > self.shape[axis]:
            raise ShapeError(
                f"narrow [{start}:{start + length}] out of range for axis {axis} of {self.shape}"
            )
        index = [slice(None)] * self.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        a = self

        def backward_fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                a._accumulate(g, own=True)

        out = Tensor._result(self.data[index].copy(), (a,), backward_fn)
        return out

    # --- operator sugar ---

    def __add__(self, other):
        return self.add(other)

    def __radd__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.sub(other)

    def __rsub__(self, other):
        return self._coerce(other).sub(self)

    def __mul__(self, other):
        return self.mul(other)

    def __rmul__(self, other):
        return self.mul(other)

    def __neg__(self):
        return self.neg()

    def __matmul__(self, other):
        return self.matmul(other)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient back."""
    parts = list(tensors)
    if not parts:
        raise ShapeError("concat of an empty tensor list")
    axis = axis % parts[0].ndim
    extents = [p.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def backward_fn():
        g = out.grad
        offset = 0
        for part, extent in zip(parts, extents):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + extent)
                part._accumulate(g[tuple(index)])
            offset += extent

    out = Tensor._result(out_data, parts, backward_fn)
    return out
