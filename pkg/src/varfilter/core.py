"""Minimal reverse-mode differentiation over dense float64 arrays.

Every value is a :class:`Node` holding a NumPy array. Operations build a
graph of parent links together with a closure computing the vector-Jacobian
product; :func:`backward` walks the graph in reverse topological order.

Arrays may carry leading batch axes. Elementwise operations broadcast with
NumPy rules and their gradients are summed back onto the operand shapes.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr

__all__ = [
    "Node", "ShapeError", "DomainError", "tensor", "parameter", "constant",
    "forward_op", "backward", "zero_grad", "finite_difference_check",
    "gradcheck_nodes", "layer_normalize", "stop_gradient",
]

_ids = itertools.count()

LEAKY_SLOPE = 1.0 / 3.0
LEAKY_CLIP = 3.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation."""

    def __init__(self, kind: str, shapes: Sequence[tuple], detail: str = ""):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kind}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """An input lies outside the domain where an op is finite."""


def tensor(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor values must be finite")
    return arr


class Node:
    """A value in the computation graph.

    ``grad`` accumulates across :func:`backward` calls for nodes that require
    gradients and have no parents (parameters and inputs); call
    :func:`zero_grad` to reset it.
    """

    __slots__ = ("value", "grad", "parents", "_vjp", "requires_grad", "kind", "id")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 vjp: Callable | None = None, kind: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 \
            else np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self._vjp = vjp
        self.kind = kind
        self.id = next(_ids)
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        return f"Node({self.kind}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return take(self, index)


def parameter(values) -> Node:
    return Node(tensor(values), requires_grad=True)


def constant(values) -> Node:
    return Node(np.asarray(values, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(kind: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Node:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, kind=kind)
    return Node(value, requires_grad=True, parents=parents, vjp=vjp, kind=kind)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(kind: str, out: np.ndarray, *inputs: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(a)) for a in inputs):
            raise DomainError(f"{kind}: input outside the finite domain of the op")
        raise DomainError(f"{kind}: non-finite input")


# --- elementwise binary -----------------------------------------------------

def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, [a.shape, b.shape]) from None


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0.0):
        raise DomainError("div: division by zero")
    av, bv = a.value, b.value
    out = av / bv
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


# --- contraction and structure ------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product. ``a`` may be a vector or a batch of row vectors."""
    a, b = _as_node(a), _as_node(b)
    if a.ndim == 0 or b.ndim == 0 or b.ndim > 2 or a.ndim > 2 \
            or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
            gb = av.T @ g if av.ndim == 2 else g * av
        elif av.ndim == 1:
            ga = bv @ g
            gb = np.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.T @ g
        return ga, gb

    return _make("matmul", av @ bv, (a, b), vjp)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", [n.shape for n in nodes]) from None
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, tuple(nodes), vjp)


def take(a: Node, index) -> Node:
    """Basic slicing, e.g. ``x[..., :4]``."""
    a = _as_node(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make("take", a.value[index], (a,), vjp)


def transpose(a) -> Node:
    a = _as_node(a)
    return _make("transpose", a.value.T, (a,), lambda g: (g.T,))


def split(a: Node, sizes: Sequence[int]) -> list[Node]:
    """Split along the last axis into consecutive blocks of ``sizes``."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError("split", [a.shape], f"block sizes {list(sizes)}")
    out, start = [], 0
    for n in sizes:
        out.append(take(a, (Ellipsis, slice(start, start + n))))
        start += n
    return out


def broadcast(a, shape: tuple) -> Node:
    a = _as_node(a)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", [a.shape, shape]) from None
    sa = a.shape
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, sa),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- elementwise unary --------------------------------------------------------

def exp(a) -> Node:
    a = _as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    _check_finite("exp", out, a.value)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: non-positive input")
    av = a.value
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Node:
    a = _as_node(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.value)
    return _make("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v):
    # exp of non-positive arguments only
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = _sigmoid(a.value)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Node:
    a = _as_node(a)
    av = a.value
    if not np.all(np.isfinite(av)):
        raise DomainError("softplus: non-finite input")
    out = np.logaddexp(0.0, av)
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def elu(a) -> Node:
    a = _as_node(a)
    av = a.value
    neg = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg)
    return _make("elu", out, (a,), lambda g: (g * np.where(av > 0, 1.0, neg + 1.0),))


def clipped_leaky_relu(a, slope: float = LEAKY_SLOPE, bound: float = LEAKY_CLIP) -> Node:
    """Leaky ReLU clipped to [-bound, bound]; zero gradient where clipped."""
    a = _as_node(a)
    av = a.value
    raw = np.where(av > 0, av, slope * av)
    out = np.clip(raw, -bound, bound)
    local = np.where(av > 0, 1.0, slope) * (np.abs(raw) < bound)
    return _make("clipped_leaky_relu", out, (a,), lambda g: (g * local,))


def clamp(a, lo: float, hi: float) -> Node:
    a = _as_node(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make("clamp", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def negate(a) -> Node:
    a = _as_node(a)
    return _make("negate", -a.value, (a,), lambda g: (-g,))


def stop_gradient(a) -> Node:
    """Same value, no gradient path back to ``a``."""
    return Node(_as_node(a).value, kind="stop_gradient")


def log_normal_interval(lo, hi, floor: float = 1e-12) -> Node:
    """``log(max(Phi(hi) - Phi(lo), floor))`` elementwise, for ``lo < hi``.

    Evaluated in whichever tail keeps the difference well conditioned. The
    floored entries have zero gradient.
    """
    lo, hi = _as_node(lo), _as_node(hi)
    _broadcast_shape("log_normal_interval", lo, hi)
    a, b = np.broadcast_arrays(lo.value, hi.value)
    if np.any(b < a):
        raise DomainError("log_normal_interval: hi < lo")
    # use the upper tail when the interval sits above zero
    upper = a > 0
    pa = np.where(upper, ndtr(-a), ndtr(a))
    pb = np.where(upper, ndtr(-b), ndtr(b))
    mass = np.where(upper, pa - pb, pb - pa)
    floored = mass < floor
    out = np.log(np.maximum(mass, floor))
    # log-space mass where the direct difference underflows
    with np.errstate(divide="ignore"):
        la = np.where(upper, log_ndtr(-a), log_ndtr(a))
        lb = np.where(upper, log_ndtr(-b), log_ndtr(b))
    tiny = (mass < 1e-300) & ~floored
    if np.any(tiny):
        hi_l, lo_l = np.where(upper, la, lb), np.where(upper, lb, la)
        out = np.where(tiny, hi_l + np.log1p(-np.exp(lo_l - hi_l)), out)
    dens_a = np.exp(-0.5 * a * a - 0.5 * _LOG_2PI)
    dens_b = np.exp(-0.5 * b * b - 0.5 * _LOG_2PI)
    safe = np.where(floored, 1.0, np.maximum(mass, 1e-300))
    ga_local = np.where(floored, 0.0, -dens_a / safe)
    gb_local = np.where(floored, 0.0, dens_b / safe)
    sa, sb = lo.shape, hi.shape
    return _make("log_normal_interval", out, (lo, hi),
                 lambda g: (_unbroadcast(g * ga_local, sa), _unbroadcast(g * gb_local, sb)))


def layer_normalize(v, eps: float = 1e-5) -> Node:
    """Normalize over the last axis: ``(v - mean) / sqrt(var + eps)``.

    Population variance, no learned gain or bias.
    """
    v = _as_node(v)
    x = v.value
    c = x - x.mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    out = c * r

    def vjp(g):
        dc = r * g - r ** 3 * c * (g * c).mean(axis=-1, keepdims=True)
        return (dc - dc.mean(axis=-1, keepdims=True),)

    return _make("layer_norm", out, (v,), vjp)


_OPS: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "sum": reduce_sum, "mean": reduce_mean, "exp": exp, "log": log,
    "transpose": transpose, "sqrt": sqrt, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus,
    "elu": elu, "square": square, "negate": negate, "broadcast": broadcast,
    "clipped_leaky_relu": clipped_leaky_relu, "clamp": clamp,
    "layer_norm": layer_normalize, "log_normal_interval": log_normal_interval,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Node:
    """Apply a registered op by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- reverse pass -------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every ancestor requiring gradients.

    Leaf gradients are added into ``node.grad`` unless ``accumulate`` is
    false; the returned map holds the gradient of every visited node for this
    pass only.
    """
    if loss.value.size != 1 or loss.ndim != 0:
        raise ShapeError("backward", [loss.shape], "loss must be a scalar")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo_order(loss)):
        g = grads.get(node.id)
        if g is None:
            continue
        if not node.parents:
            if accumulate:
                node.grad += g
            continue
        for p, gp in zip(node.parents, node._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = gp if prev is None else prev + gp
    return grads


def zero_grad(nodes) -> None:
    for n in nodes:
        n.grad = np.zeros_like(n.value)


# --- finite differences -------------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_difference_check(f: Callable[[Node], Node], params, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a parameter node to a scalar node and must be deterministic
    (reseed any sampling noise inside ``f``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = tensor(params)
    x = Node(base.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        up = f(Node(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * eps
        down = f(Node(bumped.reshape(base.shape))).item()
        flat[i] = (up - down) / (2 * eps)
    return _rel_err(analytic, numeric)


def gradcheck_nodes(loss_fn: Callable[[], Node], nodes: Sequence[Node], eps: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of ``loss_fn`` against existing leaf nodes.

    Node values are perturbed in place and restored. ``max_coords`` limits the
    number of coordinates probed per node (chosen with ``rng``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [n.grad for n in nodes]
    zero_grad(nodes)
    backward(loss_fn())
    analytic = [n.grad.copy() for n in nodes]
    for n, g in zip(nodes, saved):
        n.grad = g
    worst = 0.0
    for node, ga in zip(nodes, analytic):
        flat = node.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num[j] = (up - down) / (2 * eps)
        worst = max(worst, _rel_err(ga.reshape(-1)[idx], num))
    return worst
