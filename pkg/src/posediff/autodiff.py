"""Minimal reverse-mode automatic differentiation over numpy arrays.

The op set is deliberately closed: matmul, add/sub, Hadamard product,
concat, softmax, GELU, mean/sum, permute, reshape, sqrt and scalar powers.
Layer norm and linear layers are compositions of these primitives, so every
gradient in the package reduces to the rules below. Anything outside the set
raises NotImplementedError at graph-construction time.

Gradients accumulate into ``.grad`` (a plain ndarray) on leaf tensors with
``requires_grad=True``. Broadcasting follows numpy semantics; the backward
pass sums gradients over broadcast axes.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

__all__ = ["Tensor", "no_grad", "concat", "softmax", "gelu", "layer_norm", "linear"]

# grad mode is thread-local: concurrent inference threads each disable graph
# construction for themselves without touching the training thread. A depth
# counter (not save/restore) keeps balanced enter/exit pairs safe even when
# contexts overlap rather than nest.
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "no_grad_depth", 0) == 0


class no_grad:
    """Context manager that skips graph construction (inference mode)."""

    def __enter__(self):
        _state.no_grad_depth = getattr(_state, "no_grad_depth", 0) + 1

    def __exit__(self, *exc):
        _state.no_grad_depth -= 1


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=grad.dtype)
        self.grad += grad

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (defaults to d(self)/d(self)=1)."""
        if grad is None:
            grad = np.ones_like(self.data)
        # Iterative topological order; graphs get deep enough that recursion
        # would hit the interpreter limit.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- shape helpers ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise ops ----------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)):
            # keep python scalars at self's dtype; a float64 0-d array would
            # silently promote float32 graphs
            return Tensor(np.asarray(other, dtype=self.data.dtype))
        return Tensor(np.asarray(other))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        """Hadamard product (broadcasting)."""
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor/tensor division is outside the op set")
        return self * (1.0 / other)

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise NotImplementedError("tensor exponents are outside the op set")
        a = self
        out = a.data**p
        return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(out, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        if axis is None:
            n = a.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([a.data.shape[ax] for ax in axis]))
        else:
            n = a.data.shape[axis]
        return a.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- structural ops -----------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
        )

    def permute(self, *axes):
        a = self
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(
            a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
        )

    # -- matmul ---------------------------------------------------------------

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise NotImplementedError("matmul operands must have ndim >= 2")

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data @ b.data, (a, b), backward)


# -- functional ops ----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._make(y, (x,), backward)


# python floats: numpy scalar constants would promote float32 arrays to float64
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error GELU: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and offset."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * scale + offset


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, broadcasting over leading axes of x."""
    out = x @ weight
    return out if bias is None else out + bias
