"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so gradients can themselves be differentiated when they are
computed with ``create_graph=True`` (double backprop).

Binary elementwise primitives accept operands of identical shape, or one
0-d (scalar) operand. Anything else must go through :func:`broadcast_to`.
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager disabling graph recording (thread-local)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

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

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only power 2 is supported")
        return square(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out.op = op
    return out


# ---------------------------------------------------------------------------
# elementwise binary


def _binary_operands(name: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unscalar(g: Tensor, like: Tensor) -> Tensor:
    if like.ndim == 0 and g.ndim != 0:
        return sum_(g)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def vjp(g, need):
        return (_unscalar(g, a) if need[0] else None, _unscalar(g, b) if need[1] else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def vjp(g, need):
        return (_unscalar(g, a) if need[0] else None, _unscalar(neg(g), b) if need[1] else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)

    def vjp(g, need):
        return (
            _unscalar(mul(g, b), a) if need[0] else None,
            _unscalar(mul(g, a), b) if need[1] else None,
        )

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")

    def vjp(g, need):
        ga = _unscalar(div(g, b), a) if need[0] else None
        gb = _unscalar(neg(mul(g, div(a, square(b)))), b) if need[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, need: (neg(g),), "neg")


# ---------------------------------------------------------------------------
# elementwise unary


def _self_ref(out: Tensor):
    # vjps that reuse the output hold it weakly, avoiding a reference cycle
    return weakref.ref(out)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), (a,), None, "tanh")
    if out._parents:
        ref = _self_ref(out)

        def vjp(g, need):
            y = ref().data
            if not is_grad_enabled():
                d = np.asarray(np.square(y))
                np.subtract(1.0, d, out=d)
                d *= g.data
                return (Tensor(d),)
            return (mul(g, sub(1.0, square(ref()))),)

        out._vjp = vjp
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        e = np.exp(np.negative(x))
    e += 1.0
    return np.reciprocal(e, out=e)


def _sigmoid_node(a: Tensor, value: np.ndarray) -> Tensor:
    out = _make(value, (a,), None, "sigmoid")
    if out._parents:
        ref = _self_ref(out)

        def vjp(g, need):
            y = ref()
            if not is_grad_enabled():
                # fused y (1 - y) g when no graph is being recorded
                d = np.subtract(1.0, y.data)
                d *= y.data
                d *= g.data
                return (Tensor(d),)
            return (mul(g, mul(y, sub(1.0, y))),)

        out._vjp = vjp
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _sigmoid_node(a, _sigmoid_np(a.data))


def softplus(a) -> Tensor:
    """log(1 + e^a), evaluated as max(a, 0) + log1p(e^-|a|)."""
    a = as_tensor(a)
    e = np.abs(a.data)
    np.negative(e, out=e)
    np.exp(e, out=e)
    value = np.maximum(a.data, 0.0)
    value += np.log1p(e, out=e)
    if not (is_grad_enabled() and a.requires_grad):
        return Tensor(value)
    sig = _sigmoid_np(a.data)
    return _make(value, (a,), lambda g, need: (mul(g, _sigmoid_node(a, sig)),), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None, "exp")
    if out._parents:
        ref = _self_ref(out)
        out._vjp = lambda g, need: (mul(g, ref()),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g, need: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: input must be strictly positive (guard zero before calling)")
    out = _make(np.sqrt(a.data), (a,), None, "sqrt")
    if out._parents:
        ref = _self_ref(out)
        out._vjp = lambda g, need: (div(mul(g, 0.5), ref()),)
    return out


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), lambda g, need: (mul(g, s),), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, need: (mul(g, mul(2.0, a)),), "square")


def maximum(a, c: float) -> Tensor:
    """Elementwise max against a constant."""
    a = as_tensor(a)
    m = Tensor((a.data >= c).astype(np.float64))
    return _make(np.maximum(a.data, c), (a,), lambda g, need: (mul(g, m),), "maximum")


def minimum(a, c: float) -> Tensor:
    a = as_tensor(a)
    m = Tensor((a.data <= c).astype(np.float64))
    return _make(np.minimum(a.data, c), (a,), lambda g, need: (mul(g, m),), "minimum")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes where lo <= a <= hi."""
    a = as_tensor(a)
    m = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, need: (mul(g, m),), "clamp")


def straight_through(soft, hard) -> Tensor:
    """Forward value ``hard`` exactly; gradient flows to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {soft.shape} and {hard.shape}")
    return _make(hard.copy(), (soft,), lambda g, need: (g,), "straight_through")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, need):
        return (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        )

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g, need: (transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    src = a.shape
    return _make(data, (a,), lambda g, need: (reshape(g, src),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the vjp sums over broadcast axes."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return _make(data, (a,), lambda g, need: (sum_to(g, src),), "broadcast_to")


def sum_to(g, shape) -> Tensor:
    """Reduce ``g`` to ``shape`` by summing broadcast axes (adjoint of broadcast_to)."""
    g = as_tensor(g)
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1
    )
    out = sum_(g, axes, keepdims=True) if axes else g
    return reshape(out, shape)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = _keep_shape(src, axes)

    def vjp(g, need):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def _extremum(a, axis, keepdims, fn, name) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = _keep_shape(src, axes)
    kept = fn(a.data, axis=axes, keepdims=True)
    hit = a.data == kept
    # ties split the gradient evenly
    w = Tensor(hit / hit.sum(axis=axes, keepdims=True))
    data = kept if keepdims else kept.reshape([s for i, s in enumerate(src) if i not in axes])

    def vjp(g, need):
        return (mul(broadcast_to(reshape(g, kshape), src), w),)

    return _make(data, (a,), vjp, name)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.max, "amax")


def amin(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.min, "amin")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data[index], (a,), lambda g, need: (scatter(g, index, src),), "getitem")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def scatter(g, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index`` (adjoint of getitem)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _is_basic(index):
        out[index] += g.data
    else:
        np.add.at(out, index, g.data)
    return _make(out, (g,), lambda h, need: (getitem(h, index),), "scatter")


def pad(a, pad_width) -> Tensor:
    """Zero padding with numpy ``pad_width`` semantics."""
    a = as_tensor(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad: pad_width has {len(pad_width)} entries for ndim {a.ndim}")
    index = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g, need: (getitem(g, index),), "pad")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    axis = axis % ts[0].ndim
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: {[t.shape for t in ts]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g, need):
        out = []
        for i, n in enumerate(need):
            if not n:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(data, ts, vjp, "concatenate")


def unfold1d(a, k: int) -> Tensor:
    """Sliding windows along axis 1: (N, L, D) -> (N, L-k+1, k*D), window-major."""
    a = as_tensor(a)
    if a.ndim != 3 or a.shape[1] < k:
        raise ShapeError(f"unfold1d: need (N, L>={k}, D), got {a.shape}")
    n, length, d = a.shape
    win = sliding_window_view(a.data, k, axis=1)  # (N, T, D, k)
    data = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, length - k + 1, k * d)
    return _make(data, (a,), lambda g, need: (fold1d(g, k, length),), "unfold1d")


def fold1d(g, k: int, length: int) -> Tensor:
    """Adjoint of :func:`unfold1d`: overlap-add windows back to (N, length, D)."""
    g = as_tensor(g)
    n, t, kd = g.shape
    if t != length - k + 1 or kd % k:
        raise ShapeError(f"fold1d: shape {g.shape} inconsistent with k={k}, length={length}")
    d = kd // k
    out = np.zeros((n, length, d))
    blocks = g.data.reshape(n, t, k, d)
    for j in range(k):
        out[:, j : j + t, :] += blocks[:, :, j, :]
    return _make(out, (g,), lambda h, need: (unfold1d(h, k),), "fold1d")


# ---------------------------------------------------------------------------
# composite functions


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, broadcast_to(shift, x.shape))
    e = exp(z)
    return div(e, broadcast_to(sum_(e, axis=axis, keepdims=True), x.shape))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, broadcast_to(shift, x.shape))
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return sub(z, broadcast_to(lse, x.shape))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Per-row cross-entropy of (N, C) logits against integer targets, shape (N,)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    oh = Tensor(one_hot(targets, logits.shape[1]))
    return neg(sum_(mul(log_softmax(logits, axis=1), oh), axis=1))


def select(logits, classes) -> Tensor:
    """Pick logits[n, classes[n]] -> (N,)."""
    logits = as_tensor(logits)
    return sum_(mul(logits, Tensor(one_hot(classes, logits.shape[1]))), axis=1)


# ---------------------------------------------------------------------------
# graph traversal


def tape(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor] | Tensor,
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor | None]:
    """Gradients of ``output`` w.r.t. ``inputs``.

    With ``create_graph=True`` the returned tensors are themselves graph
    nodes and can be differentiated again.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if not output.requires_grad:
        raise GradientError(
            "output does not require grad; if it was built from gradients, "
            "compute those gradients with create_graph=True (higher-order mode)"
        )
    if grad_output is None:
        if output.size != 1:
            raise GradientError(f"grad requires a scalar output, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape))
    order = tape(output)
    targets = {id(t) for t in inputs}
    # restrict the sweep to nodes that lie on a path from some input
    live: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in live for p in node._parents):
            live.add(id(node))
    grads: dict[int, Tensor] = {id(output): grad_output}
    found: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or id(node) not in live:
                continue
            if id(node) in targets:
                found[id(node)] = g
            if node._vjp is None:
                continue
            need = tuple(p.requires_grad and id(p) in live for p in node._parents)
            if not any(need):
                continue
            for p, pg, n in zip(node._parents, node._vjp(g, need), need):
                if not n or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = [found.get(id(t)) for t in inputs]
    return out[0] if single else out


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError(
            "loss does not require grad; if it was built from gradients, "
            "compute those gradients with create_graph=True (higher-order mode)"
        )
    leaves = [n for n in tape(loss) if n.is_leaf]
    for leaf, g in zip(leaves, grad(loss, leaves, create_graph=create_graph)):
        if g is None:
            continue
        if not create_graph:
            g = Tensor(g.data)
        leaf.grad = g if leaf.grad is None else (add(leaf.grad, g) if create_graph else Tensor(leaf.grad.data + g.data))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
