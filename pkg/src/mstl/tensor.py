"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything numeric in the package flows through this module. The design is
define-by-run: each operation records its parents and a backward closure on
the output tensor, and ``backward()`` replays the resulting tape in reverse
topological order. 64-bit precision throughout; desk-scale sizes make the
memory cost irrelevant and the precision keeps finite-difference checks sharp.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (e.g. key-encoder forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    ``data`` is row-major; ``grad`` is filled lazily during ``backward``.
    Tensors are value-semantic: ops never alias their inputs' storage into
    the output.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # -- introspection -------------------------------------------------

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
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._seed_grad()
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _seed_grad(self) -> None:
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError("T is defined for matrices")
        return permute(self, (1, 0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A named trainable leaf.

    ``gradient`` is always allocated (zeros between steps) so it keeps the
    same shape as the value; ``sgd_step`` owns the velocity buffer.
    """

    __slots__ = ("name", "_velocity")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self._velocity = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        assert self.grad is not None
        return self.grad

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward, "div")


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _node(data, (a,), backward, "exp")


def tlog(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(data, (a,), backward, "log")


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g / (2.0 * data))

    return _node(data, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return _node(data, (a,), backward, "relu")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).copy())

    return _node(data, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node(data, (a,), backward, "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _node(data, (a,), backward, "permute")


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(sl)])
            offset += n

    return _node(data, tuple(parts), backward, "concat")


# ---------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise DimensionError("matmul handles 1-D/2-D operands; use bmm for batches")
    data = a.data @ b.data

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        elif a.ndim == 2 and b.ndim == 2:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        else:  # 1-D @ 2-D
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))

    return _node(data, (a, b), backward, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matmul: (n,p,q) @ (n,q,r) -> (n,p,r)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError("bmm expects rank-3 operands")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ np.transpose(b.data, (0, 2, 1)))
        _accum(b, np.transpose(a.data, (0, 2, 1)) @ g)

    return _node(data, (a, b), backward, "bmm")


def proj_channels(w, x) -> Tensor:
    """Per-position channel projection: w (o,c) applied to x (n,c,p) -> (n,o,p).

    Equivalent to a 1x1 convolution on an unfolded spatial axis.
    """
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 2 or x.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"channel projection mismatch: w {w.shape} vs x {x.shape}"
        )
    data = np.einsum("oc,ncp->nop", w.data, x.data)

    def backward(g):
        _accum(w, np.einsum("nop,ncp->oc", g, x.data))
        _accum(x, np.einsum("oc,nop->ncp", w.data, g))

    return _node(data, (w, x), backward, "proj_channels")


# ---------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------


def _as_batched_image(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected h x w x c or n x h x w x c input, got {x.shape}")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, channels-last.

    x: (h,w,c) or (n,h,w,c); kernel: (k,k,c,c'). Output spatial extents are
    floor((dim + 2*padding - k)/stride) + 1. Gradients flow to both inputs.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xb, squeeze = _as_batched_image(x)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be k x k x c x c', got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ContractError("kernel size must be odd")
    n, h, w, c = xb.shape
    if c != kernel.shape[2]:
        raise DimensionError(
            f"input channels {c} do not match kernel channels {kernel.shape[2]}"
        )
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError("kernel larger than padded input")

    xp = np.pad(xb.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    kd = kernel.data
    out = np.zeros((n, oh, ow, kd.shape[3]))
    # accumulate one kernel tap at a time; each tap is a big BLAS contraction
    for i in range(k):
        for j in range(k):
            patch = xp[:, i : i + (oh - 1) * stride + 1 : stride,
                       j : j + (ow - 1) * stride + 1 : stride, :]
            out += np.einsum("nhwc,co->nhwo", patch, kd[i, j], optimize=True)

    def backward(g):
        if squeeze:
            g = g.reshape((1,) + g.shape) if g.ndim == 3 else g
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + (oh - 1) * stride + 1, stride)
                cols = slice(j, j + (ow - 1) * stride + 1, stride)
                patch = xp[:, rows, cols, :]
                gk[i, j] = np.einsum("nhwc,nhwo->co", patch, g, optimize=True)
                gxp[:, rows, cols, :] += np.einsum(
                    "nhwo,co->nhwc", g, kd[i, j], optimize=True
                )
        _accum(kernel, gk)
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding, :]
        else:
            gx = gxp
        _accum(x, gx.reshape(x.shape))

    data = out[0] if squeeze else out
    return _node(data, (x, kernel), backward, "conv2d")


def avg_pool2d(x, size: int) -> Tensor:
    """Non-overlapping average pooling with window == stride == size."""
    x = as_tensor(x)
    xb, squeeze = _as_batched_image(x)
    n, h, w, c = xb.shape
    if h % size or w % size:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    data = xb.data.reshape(n, h // size, size, w // size, size, c).mean(axis=(2, 4))

    def backward(g):
        if squeeze and g.ndim == 3:
            g = g.reshape((1,) + g.shape)
        gx = np.repeat(np.repeat(g, size, axis=1), size, axis=2) / (size * size)
        _accum(x, gx.reshape(x.shape))

    out = data[0] if squeeze else data
    return _node(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: (h,w,c) -> (c,), (n,h,w,c) -> (n,c)."""
    x = as_tensor(x)
    if x.ndim == 3:
        return tmean(x, axis=(0, 1))
    if x.ndim == 4:
        return tmean(x, axis=(1, 2))
    raise DimensionError(f"expected image tensor, got shape {x.shape}")


def softmax_columns(m) -> Tensor:
    """Column-wise softmax with max-subtraction; columns sum to 1.

    Accepts a matrix (a,b) or a batch (n,a,b); the softmax runs over axis -2
    so each column of each matrix is a distribution.
    """
    m = as_tensor(m)
    if m.ndim < 2:
        raise DimensionError("softmax_columns expects a matrix")
    z = m.data - m.data.max(axis=-2, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-2, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-2, keepdims=True)
        _accum(m, s * (g - inner))

    return _node(s, (m,), backward, "softmax_columns")


def cross_entropy(logits, true_class: int) -> Tensor:
    """-log softmax(logits)[true_class] for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise DimensionError("cross_entropy expects a 1-D logit vector")
    c = logits.shape[0]
    idx = int(true_class)
    if idx < 0 or idx >= c:
        raise IndexError(f"class index {idx} out of range for {c} logits")
    zmax = logits.data.max()
    lse = zmax + np.log(np.exp(logits.data - zmax).sum())
    data = lse - logits.data[idx]

    def backward(g):
        p = np.exp(logits.data - lse)
        p[idx] -= 1.0
        _accum(logits, g * p)

    return _node(np.asarray(data), (logits,), backward, "cross_entropy")


def cross_entropy_rows(logits, classes, reduction: str = "mean") -> Tensor:
    """Row-wise cross entropy for (n,c) logits and n integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_rows expects (n,c) logits")
    classes = np.asarray(classes, dtype=np.int64)
    n, c = logits.shape
    if classes.shape != (n,):
        raise DimensionError("one label per logit row required")
    if classes.min() < 0 or classes.max() >= c:
        raise IndexError("class index out of range")
    zmax = logits.data.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits.data - zmax).sum(axis=1))
    losses = lse - logits.data[np.arange(n), classes]
    if reduction == "mean":
        data, scale = losses.mean(), 1.0 / n
    elif reduction == "sum":
        data, scale = losses.sum(), 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(n), classes] -= 1.0
        _accum(logits, float(g) * scale * p)

    return _node(np.asarray(data), (logits,), backward, "cross_entropy_rows")


# ---------------------------------------------------------------------
# training utilities
# ---------------------------------------------------------------------


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """In-place SGD with classical momentum and L2 weight decay.

    v <- momentum * v + (grad + weight_decay * value); value <- value - lr * v.
    """
    if lr < 0:
        raise ContractError("lr must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ContractError("momentum must be in [0, 1)")
    if weight_decay < 0:
        raise ContractError("weight_decay must be >= 0")
    for p in params:
        p._velocity *= momentum
        p._velocity += p.grad + weight_decay * p.data
        p.data -= lr * p._velocity


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` must map a tensor to a scalar tensor and be pure in everything but
    ``point``. Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-6);
    the floor keeps finite-difference cancellation noise from registering as
    a large relative error on near-zero gradient entries.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x = Tensor(np.array(as_tensor(point).data, dtype=np.float64), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(x).data)
            flat[i] = orig - step
            f_minus = float(f(x).data)
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
