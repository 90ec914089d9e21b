"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed (float32 by default, float64 for gradient-check
suites). Every differentiable operation records its parent tensors and a
backward rule; `backward` walks the graph once in reverse topological
order, so gradient accumulation order is fixed and results are
reproducible bit for bit.

Broadcasting is deliberately narrow: python scalars combine with any
tensor, and `add` additionally accepts a trailing-axis bias vector.
Everything else must match shapes exactly; richer broadcasts (e.g. a
single-channel mask against an RGB image) go through explicit expansion
ops with their own backward rules.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routes into the module-level ops below
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

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution; `g` may alias buffers the caller reuses."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray) -> None:
    """Like `_accum` for arrays freshly allocated by the backward rule, which
    may be adopted without a defensive copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tensor the scalar `loss` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        s = float(b)
        return _node(a.data + s, (a,), lambda g, a=a: _accum(a, g))
    if _is_scalar(a) and isinstance(b, Tensor):
        return add(b, a)
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError(f"add expects tensors or a scalar operand, got {type(a)}, {type(b)}")
    if a.shape == b.shape:
        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)

        return _node(a.data + b.data, (a, b), bw)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        # bias vector broadcast over the trailing axis only
        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum_owned(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

        return _node(a.data + b.data, (a, b), bw)
    raise ShapeError(f"add cannot broadcast shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return add(a, -float(b))
    if _is_scalar(a) and isinstance(b, Tensor):
        s = float(a)
        return _node(s - b.data, (b,), lambda g, b=b: _accum_owned(b, -g))
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError(f"sub expects tensors or a scalar operand, got {type(a)}, {type(b)}")
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g, a=a, b=b):
        _accum(a, g)
        _accum_owned(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return scale(a, float(b))
    if _is_scalar(a) and isinstance(b, Tensor):
        return scale(b, float(a))
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError(f"mul expects tensors or a scalar operand, got {type(a)}, {type(b)}")
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g, a=a, b=b):
        _accum_owned(a, g * b.data)
        _accum_owned(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g, a=a, s=s: _accum_owned(a, g * s))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g, a=a, mask=mask: _accum_owned(a, g * mask))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g, a=a, out=out: _accum_owned(a, g * out * (1.0 - out)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g, a=a, out=out: _accum_owned(a, g * out))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, a=a, out=out, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum_owned(a, out * (g - dot))

    return _node(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g, a=a, b=b):
        _accum_owned(a, np.matmul(g, np.swapaxes(b.data, -2, -1)))
        _accum_owned(b, np.matmul(np.swapaxes(a.data, -2, -1), g))

    return _node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and indexing


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _node(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims, n=n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum_owned(a, np.broadcast_to(g, a.data.shape) / n)

    return _node(np.asarray(out), (a,), bw)


def max_axis(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along one axis; the gradient flows to the (first) argmax."""
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g, a=a, idx=idx, axis=axis):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis=axis)
        _accum_owned(a, buf)

    return _node(out, (a,), bw)


def gather_labels(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pick logits[i, labels[i]] for each row."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    out = logits.data[rows, labels]

    def bw(g, logits=logits, rows=rows, labels=labels):
        buf = np.zeros_like(logits.data)
        buf[rows, labels] = g
        _accum_owned(logits, buf)

    return _node(out, (logits,), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 (used to split a batch by domain)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bw(g, a=a, idx=idx):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum_owned(a, buf)

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g, a=a: _accum(a, g.reshape(a.data.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _node(out, (a,), lambda g, a=a, inv=inv: _accum(a, g.transpose(inv)))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def bw(g, a=a, sl=sl):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        _accum_owned(a, buf)

    return _node(out, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, parts=tuple(parts), offsets=offsets, axis=axis):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _node(out, tuple(parts), bw)


def expand_axis1(a: Tensor, n: int) -> Tensor:
    """Repeat a size-1 axis 1 to size n (e.g. mask -> per-channel mask)."""
    if a.data.ndim < 2 or a.data.shape[1] != 1:
        raise ShapeError(f"expand_axis1 needs size 1 at axis 1, got {a.shape}")
    out = np.repeat(a.data, n, axis=1)
    return _node(out, (a,), lambda g, a=a: _accum_owned(a, g.sum(axis=1, keepdims=True)))


def tile_axis0(a: Tensor, n: int) -> Tensor:
    """Stack n copies of `a` along a new leading axis (shared-parameter broadcast)."""
    out = np.broadcast_to(a.data[None], (n,) + a.data.shape).copy()
    return _node(out, (a,), lambda g, a=a: _accum_owned(a, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of `f` against central differences.

    Returns the worst relative error max|g_ad - g_fd| / max(1e-12, |g_ad|+|g_fd|)
    over every checked coordinate of `tensors`. When `sample` is given, only
    that many randomly chosen coordinates per tensor are perturbed (the
    analytic gradient is still exact and complete).
    """
    for t in tensors:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        ad_flat = analytic[ti].reshape(-1)
        if sample is not None and flat.size > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=sample, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data.reshape(()))
            flat[i] = orig - eps
            lo = float(f().data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ContractError(f"non-finite loss while perturbing tensor {ti} coordinate {int(i)}")
            fd = (hi - lo) / (2.0 * eps)
            ad = float(ad_flat[i])
            err = abs(ad - fd) / max(1e-12, abs(ad) + abs(fd))
            if err > worst:
                worst = err
    return worst
