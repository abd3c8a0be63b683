"""Dense-tensor math with reverse-mode automatic differentiation.

Pure numpy at desk scale: every operation records its inputs and a backward
closure on the output node, ``backward()`` topologically sorts the graph and
visits nodes in exact reverse order.  Two float precisions are supported,
float32 for training throughput and float64 for gradient verification; binary
operations refuse mixed precision so the two never silently blend.

The primitive set is the minimum needed for a small decoder-only transformer:
matmul, add, mul, reshape/transpose/concat, softmax and log-softmax over the
last axis, layernorm, gelu, embedding lookup, fancy index select, masked fill
(additive large-negative sentinel), and scalar reductions.
"""

from __future__ import annotations

import numpy as np

# Additive fill applied to disallowed attention logits before softmax.  Large
# enough that exp() underflows to exactly 0.0, small enough not to overflow
# the dtype when added to an ordinary logit.
MASK_FILL_F32 = -1.0e9
MASK_FILL_F64 = -1.0e18


def mask_fill_value(dtype: np.dtype) -> float:
    """Sentinel used by masked_fill for the given float dtype."""
    if np.dtype(dtype) == np.float64:
        return MASK_FILL_F64
    if np.dtype(dtype) == np.float32:
        return MASK_FILL_F32
    raise TypeError(f"mask_fill_value: unsupported dtype {dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Sum away leading axes that were added by broadcasting.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Sum over axes that were size-1 in the original.
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode autodiff needs.

    `data` is the forward value, `grad` accumulates the gradient (lazily, None
    until backward reaches the node), `_parents` and `_backward` encode the
    recorded operation that produced this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing ----------------------------------------------------

    def accumulate(self, g: np.ndarray) -> None:
        """Add `g` into this node's gradient buffer (never mutates in place)."""
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar node (single shot).

        Builds the topological order of the recorded graph, then visits nodes
        in exact reverse order, each node pushing gradient to its parents.
        Intermediate gradients and backward closures are released as soon as
        they are spent: the closures reference their own output node, and that
        reference cycle would otherwise pin every activation of the step until
        the cyclic collector happens to run.  Leaf gradients are kept.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        # Iterative depth-first topological sort; graphs for long sequences
        # would blow the recursion limit otherwise.
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                node._backward = None
                if node is not self:
                    node.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Wrap an op result, recording parents only when gradients can flow."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def as_tensor(x, dtype=np.float32) -> Tensor:
    """Constant (no-grad) tensor with an explicit dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _result(a.data + a.data.dtype.type(b), (a,))
        if out.requires_grad:
            def _bw():
                a.accumulate(_unbroadcast(out.grad, a.shape))
            out._backward = _bw
        return out
    _check_same_dtype("add", a, b)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scale = a.data.dtype.type(b)
        out = _result(a.data * scale, (a,))
        if out.requires_grad:
            def _bw():
                a.accumulate(_unbroadcast(out.grad * scale, a.shape))
            out._backward = _bw
        return out
    _check_same_dtype("mul", a, b)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading batch dims (numpy semantics)."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
                a.accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
                b.accumulate(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(x.data.reshape(shape), (x,))
    if out.requires_grad:
        def _bw():
            x.accumulate(out.grad.reshape(x.shape))
        out._backward = _bw
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _result(x.data.transpose(axes), (x,))
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        def _bw():
            x.accumulate(out.grad.transpose(inv))
        out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    for t in tensors[1:]:
        _check_same_dtype("concat", tensors[0], t)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        def _bw():
            pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t.accumulate(g)
        out._backward = _bw
    return out


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * s).sum(axis=-1, keepdims=True)
            x.accumulate(s * (g - dot))
        out._backward = _bw
    return out


def log_softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = _result(logp, (x,))
    if out.requires_grad:
        p = np.exp(logp)
        def _bw():
            g = out.grad
            x.accumulate(g - p * g.sum(axis=-1, keepdims=True))
        out._backward = _bw
    return out


def layernorm_last(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    y = (x.data - mu) * inv
    out = _result(y, (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (g - gm - y * gym))
        out._backward = _bw
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    d = x.data
    d2 = d * d
    u = _GELU_C * (d + _GELU_A * (d2 * d))   # d**3 via mul; pow is ~80x slower
    t = np.tanh(u)
    out = _result(0.5 * d * (1.0 + t), (x,))
    if out.requires_grad:
        def _bw():
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * d2)
            local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du
            x.accumulate(out.grad * local.astype(d.dtype))
        out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into `table`; duplicate ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]")
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate(g)
        out._backward = _bw
    return out


def index_select(x: Tensor, index) -> Tensor:
    """Fancy indexing x[index]; backward scatter-adds (duplicates accumulate)."""
    out = _result(x.data[index], (x,))
    if out.requires_grad:
        # np.add.at is an order of magnitude slower than plain assignment, so
        # detect duplicate-free integer row gathers once at build time.
        unique_rows = (isinstance(index, np.ndarray) and index.ndim == 1
                       and index.dtype.kind in "iu"
                       and np.unique(index).size == index.size)

        def _bw():
            g = np.zeros_like(x.data)
            if unique_rows:
                g[index] = out.grad
            else:
                np.add.at(g, index, out.grad)
            x.accumulate(g)
        out._backward = _bw
    return out


def masked_fill(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Add a large-negative sentinel where `allowed` is False.

    The fill is additive, so after softmax the disallowed positions underflow
    to exactly zero probability.  Gradient passes through unchanged.
    """
    allowed = np.asarray(allowed, dtype=bool)
    fill = np.where(allowed, x.data.dtype.type(0), x.data.dtype.type(mask_fill_value(x.data.dtype)))
    out = _result(x.data + fill, (x,))
    if out.requires_grad:
        def _bw():
            x.accumulate(_unbroadcast(out.grad, x.shape))
        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    if out.requires_grad:
        def _bw():
            x.accumulate(np.broadcast_to(out.grad, x.shape).astype(x.data.dtype, copy=False))
        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,))
    if out.requires_grad:
        def _bw():
            x.accumulate(np.broadcast_to(out.grad / n, x.shape).astype(x.data.dtype, copy=False))
        out._backward = _bw
    return out
