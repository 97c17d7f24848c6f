"""Reverse-mode autodiff over float64 numpy arrays.

Graphs are define-by-run: each operation records its parent tensors and a
closure that pushes the output gradient back to them. ``backward()`` walks
the recorded graph once in reverse topological order, so values reused in
several places accumulate their gradients exactly once per use.

Every operation validates that its output is finite; a NaN or Inf raises
``NonFiniteError`` at the op that produced it instead of propagating.

A graph and its tensors belong to the thread that built them. Detached
tensors (no parents) are plain value holders and may be shared freely.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class TensorError(ValueError):
    """Shape mismatch, domain error, or misuse of the graph API."""


class NonFiniteError(TensorError):
    """A NaN or Inf appeared in a tensor value."""


class ZeroNormError(TensorError):
    """A zero-length vector reached a norm-dependent operation."""


def _c_array(values):
    """float64 view/copy, C-contiguous, preserving 0-d shapes
    (np.ascontiguousarray would promote scalars to 1-d)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Float64 n-d array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        arr = _c_array(values)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with NaN or Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"'{op}' produced NaN or Inf values")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def detach(self):
        """Value-only copy of this tensor, cut loose from any graph."""
        return Tensor(self.data.copy())

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data

        def backward(g):
            self.grad += _unbroadcast(g, self.data.shape)
            other.grad += _unbroadcast(g, other.data.shape)

        return Tensor._from_op(data, (self, other), backward, "add")

    def __sub__(self, other):
        other = as_tensor(other)
        data = self.data - other.data

        def backward(g):
            self.grad += _unbroadcast(g, self.data.shape)
            other.grad -= _unbroadcast(g, other.data.shape)

        return Tensor._from_op(data, (self, other), backward, "sub")

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data

        def backward(g):
            self.grad += _unbroadcast(g * other.data, self.data.shape)
            other.grad += _unbroadcast(g * self.data, other.data.shape)

        return Tensor._from_op(data, (self, other), backward, "mul")

    def __truediv__(self, other):
        other = as_tensor(other)
        if np.any(other.data == 0.0):
            raise TensorError("division by zero")
        data = self.data / other.data

        def backward(g):
            self.grad += _unbroadcast(g / other.data, self.data.shape)
            other.grad += _unbroadcast(-g * self.data / (other.data * other.data),
                                       other.data.shape)

        return Tensor._from_op(data, (self, other), backward, "div")

    def __neg__(self):
        def backward(g):
            self.grad -= g

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return as_tensor(other) - self

    # -- linear algebra ------------------------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise TensorError(
                f"matmul shape mismatch: {self.shape} @ {other.shape}")
        data = self.data @ other.data

        def backward(g):
            self.grad += g @ other.data.T
            other.grad += self.data.T @ g

        return Tensor._from_op(data, (self, other), backward, "matmul")

    @property
    def T(self):
        if self.ndim != 2:
            raise TensorError(f"transpose needs a 2-d tensor, got {self.shape}")

        def backward(g):
            self.grad += g.T

        return Tensor._from_op(_c_array(self.data.T), (self,),
                               backward, "transpose")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g):
            self.grad += g.reshape(self.data.shape)

        return Tensor._from_op(_c_array(data), (self,), backward,
                               "reshape")

    # -- nonlinearities ------------------------------------------------------

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self.grad += g * mask

        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,),
                               backward, "relu")

    def tanh(self):
        t = np.tanh(self.data)

        def backward(g):
            self.grad += g * (1.0 - t * t)

        return Tensor._from_op(t, (self,), backward, "tanh")

    def exp(self):
        e = np.exp(self.data)

        def backward(g):
            self.grad += g * e

        return Tensor._from_op(e, (self,), backward, "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise TensorError("log of non-positive value")
        data = np.log(self.data)

        def backward(g):
            self.grad += g / self.data

        return Tensor._from_op(data, (self,), backward, "log")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.data.shape)

        return Tensor._from_op(np.asarray(data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def l2_norm(self, axis=None, keepdims=False):
        """Euclidean norm over all elements or along one axis."""
        norm = np.sqrt((self.data * self.data).sum(axis=axis, keepdims=keepdims))

        def backward(g):
            if np.any(norm == 0.0):
                raise ZeroNormError("gradient of l2_norm at a zero vector")
            n = norm
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
                n = np.expand_dims(n, axis)
            self.grad += g * self.data / n

        return Tensor._from_op(np.asarray(norm), (self,), backward, "l2_norm")

    # -- indexing and shape surgery -------------------------------------------

    def __getitem__(self, idx):
        data = self.data[idx]
        advanced = _is_advanced_index(idx)

        def backward(g):
            if advanced:
                np.add.at(self.grad, idx, g)
            else:
                self.grad[idx] += g

        return Tensor._from_op(_c_array(data), (self,), backward,
                               "slice")

    # -- convolution kernels ----------------------------------------------------

    def conv2d(self, weight):
        """Stride-1 valid cross-correlation of (B,C,H,W) with (F,C,kh,kw)."""
        weight = as_tensor(weight)
        if self.ndim != 4 or weight.ndim != 4 or self.shape[1] != weight.shape[1]:
            raise TensorError(
                f"conv2d shape mismatch: {self.shape} with {weight.shape}")
        data = kernels.conv2d_forward(self.data, weight.data)

        def backward(g):
            g = np.ascontiguousarray(g)
            self.grad += kernels.conv2d_backward_x(g, weight.data)
            weight.grad += kernels.conv2d_backward_w(self.data, g)

        return Tensor._from_op(data, (self, weight), backward, "conv2d")

    def maxpool2(self):
        """2x2 stride-2 max pool over the trailing two axes of (B,C,H,W)."""
        if self.ndim != 4:
            raise TensorError(f"maxpool2 needs a 4-d tensor, got {self.shape}")
        h, w = self.shape[2], self.shape[3]
        data, idx = kernels.maxpool2_forward(self.data)

        def backward(g):
            self.grad += kernels.maxpool2_backward(np.ascontiguousarray(g), idx, h, w)

        return Tensor._from_op(data, (self,), backward, "maxpool2")

    # -- backward pass ---------------------------------------------------------

    def backward(self):
        """Populate .grad for every tensor this scalar loss depends on."""
        if self.data.size != 1:
            raise TensorError(
                f"backward() needs a scalar loss, got shape {self.shape}")
        order = self._topo_order()
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _topo_order(self):
        order = []
        visited = set()
        stack = [(self, False)]
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
        return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_advanced_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# ---------------------------------------------------------------------------
# composite operations
# ---------------------------------------------------------------------------

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.grad += g[tuple(sl)]

    return Tensor._from_op(data, tuple(tensors), backward, "concat")


def cosine_similarity(a, b):
    """Cosine of the angle between two 1-d vectors; errors on zero norm."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise TensorError(
            f"cosine_similarity needs equal-length vectors, got {a.shape}, {b.shape}")
    if np.linalg.norm(a.data) == 0.0 or np.linalg.norm(b.data) == 0.0:
        raise ZeroNormError("cosine_similarity of a zero vector")
    return (a * b).sum() / (a.l2_norm() * b.l2_norm())


def normalize_rows(a):
    """Scale each row of a 2-d tensor to unit Euclidean length."""
    a = as_tensor(a)
    norms = np.linalg.norm(a.data, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError("normalize_rows hit an all-zero row")
    return a / a.l2_norm(axis=1, keepdims=True)


def pairwise_cosine(a, b):
    """All pairwise cosine similarities between rows of a (m,n) and b (k,n)."""
    return normalize_rows(a) @ normalize_rows(b).T


def rowwise_cosine(a, b):
    """Cosine similarity between corresponding rows of two (m,n) tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise TensorError(f"rowwise_cosine shape mismatch: {a.shape}, {b.shape}")
    return (normalize_rows(a) * normalize_rows(b)).sum(axis=1)


def softmax(x, axis=-1):
    """Numerically stable softmax along one axis (max-shifted before exp)."""
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x, axis=-1, keepdims=False):
    """log(sum(exp(x))) along one axis, max-shifted for stability."""
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    inner = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if keepdims:
        return inner
    return inner.reshape(np.asarray(x.data.max(axis=axis)).shape)


def finite_difference_check(f, point, h=1e-5):
    """Compare the analytic gradient of scalar-valued ``f`` at ``point`` with
    central differences; returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    x = Tensor(np.array(as_tensor(point).data, copy=True), requires_grad=True)
    f(x).backward()
    analytic = x.grad.copy()

    probe = x.data.copy()
    flat = probe.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(probe)).item()
        flat[i] = orig - h
        fm = f(Tensor(probe)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(analytic.shape)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
