"""Dense reverse-mode differentiation over numpy arrays.

Graphs are built eagerly: every op call evaluates immediately and records a
:class:`Node`.  :func:`forward` re-evaluates a recorded graph from its leaves
(used by the finite-difference checker), :func:`backward` returns gradients
of a scalar root with respect to every leaf.

Only the operations the graph network needs are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class GraphError(ValueError):
    pass


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "name", "ctx", "requires_grad")

    def __init__(self, op, inputs, value, name=None, requires_grad=False, ctx=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self.ctx = ctx
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        kind = self.op.name if self.op is not None else "leaf"
        return f"Node({kind}, name={self.name!r}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, constant(-1.0))


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def leaf(value, name=None, requires_grad=True) -> Node:
    return Node(None, (), np.asarray(value, dtype=np.float64), name=name, requires_grad=requires_grad)


def constant(value, name=None) -> Node:
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float64, copy=False)
    return Node(None, (), arr, name=name, requires_grad=False)


class Op:
    """Base class.  Subclasses implement ``forward`` and ``backward``."""

    name = "op"
    differentiable = True

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, ctx, g, *xs):
        raise NotImplementedError

    def signature(self, ctx) -> bytes | None:
        """Discrete choices made in forward (argmax, kNN sets, kink sides)."""
        return None


def apply(op: Op, *inputs: Node, name=None) -> Node:
    vals = [n.value for n in inputs]
    try:
        value, ctx = op.forward(*vals)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(np.shape(v)) for v in vals)
        raise GraphError(f"{op.name} node {name or ''} failed on input shapes [{shapes}]: {exc}") from exc
    rg = op.differentiable and any(n.requires_grad for n in inputs)
    return Node(op, tuple(inputs), value, name=name, requires_grad=rg, ctx=ctx)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ValueError(f"shapes {np.shape(a)} and {np.shape(b)} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise


class Add(Op):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a + b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a - b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g, np.shape(a)), -_unbroadcast(g, np.shape(b))


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a * b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


class LeakyReLU(Op):
    name = "leaky_relu"

    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, pos, g, x):
        return (np.where(pos, g, self.slope * g),)

    def signature(self, pos):
        return np.packbits(pos).tobytes()


class Tanh(Op):
    name = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, g, x):
        return (g * (1.0 - y * y),)


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
        return a @ b, None

    def backward(self, ctx, g, a, b):
        return g @ b.T, a.T @ g


class Concat(Op):
    name = "concat"

    def __init__(self, axis=1):
        self.axis = axis

    def forward(self, *xs):
        sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis), np.cumsum(sizes)[:-1]

    def backward(self, splits, g, *xs):
        return tuple(np.split(g, splits, axis=self.axis))


class Slice(Op):
    name = "slice"

    def __init__(self, axis, start, stop):
        self.axis, self.start, self.stop = axis, start, stop

    def _index(self, ndim):
        idx = [slice(None)] * ndim
        idx[self.axis] = slice(self.start, self.stop)
        return tuple(idx)

    def forward(self, x):
        return x[self._index(x.ndim)], None

    def backward(self, ctx, g, x):
        out = np.zeros_like(x)
        out[self._index(x.ndim)] = g
        return (out,)


class TakeRows(Op):
    name = "take_rows"

    def __init__(self, index):
        self.index = np.asarray(index, dtype=np.int64)

    def forward(self, x):
        return x[self.index], None

    def backward(self, ctx, g, x):
        out = np.zeros_like(x)
        np.add.at(out, self.index, g)
        return (out,)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(self.shape), None

    def backward(self, ctx, g, x):
        return (g.reshape(x.shape),)


class Sum(Op):
    name = "sum"

    def forward(self, x):
        return np.asarray(x.sum()), None

    def backward(self, ctx, g, x):
        return (np.full_like(x, float(g)),)


class Mean(Op):
    name = "mean"

    def forward(self, x):
        return np.asarray(x.mean()), None

    def backward(self, ctx, g, x):
        return (np.full_like(x, float(g) / x.size),)


class RowNorm(Op):
    """Euclidean norm of each row; zero rows get a zero subgradient."""

    name = "row_norm"

    def forward(self, x):
        n = np.sqrt((x * x).sum(axis=1))
        return n, n

    def backward(self, n, g, x):
        safe = np.where(n > 0, n, 1.0)
        return (x * (g / safe * (n > 0))[:, None],)


class L2Normalize(Op):
    name = "l2_normalize"

    def __init__(self, eps=1e-12):
        self.eps = eps

    def forward(self, x):
        n = np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), self.eps)
        y = x / n
        return y, (y, n)

    def backward(self, ctx, g, x):
        y, n = ctx
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,)


# ---------------------------------------------------------------------------
# Normalisation and graph aggregation


class BatchNorm(Op):
    """Per-feature normalisation over axis 0.

    In training mode the batch statistics (biased variance) are used and left in
    ``ctx`` for the caller to fold into running estimates; in inference mode the
    running statistics passed at construction are used.
    """

    name = "batch_norm"

    def __init__(self, training=True, running_mean=None, running_var=None, eps=1e-5):
        self.training = training
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps

    def forward(self, x, gamma, beta):
        if x.shape[1] != gamma.shape[0]:
            raise ValueError(f"width {x.shape[1]} does not match normaliser width {gamma.shape[0]}")
        if self.training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return xhat * gamma + beta, {"xhat": xhat, "inv": inv, "mean": mean, "var": var}

    def backward(self, ctx, g, x, gamma, beta):
        xhat, inv = ctx["xhat"], ctx["inv"]
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gamma
        if self.training:
            m = x.shape[0]
            dx = inv / m * (m * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        else:
            dx = gx * inv
        return dx, dgamma, dbeta


class Knn(Op):
    """Per-segment k-nearest-neighbour index table (not differentiable)."""

    name = "knn"
    differentiable = False

    def __init__(self, k, starts):
        self.k = int(k)
        self.starts = np.asarray(starts, dtype=np.int64)

    def forward(self, x):
        nbr = kernels.knn_segments(x, self.starts, self.k)
        return nbr, nbr

    def backward(self, ctx, g, x):
        return (None,)

    def signature(self, nbr):
        return nbr.tobytes()


class GatherMax(Op):
    """``out[i, c] = max_m x[nbr[i, m], c]``; ties go to the lowest node index."""

    name = "gather_max"

    def forward(self, x, nbr):
        if nbr.ndim != 2 or nbr.max(initial=0) >= x.shape[0]:
            raise ValueError("neighbour table does not index the feature rows")
        out, arg = kernels.gather_max(x, nbr)
        return out, arg

    def backward(self, arg, g, x, nbr):
        return kernels.scatter_add_rows(g, arg, x.shape[0]), None

    def signature(self, arg):
        return arg.tobytes()


class SegmentMax(Op):
    name = "segment_max"

    def __init__(self, starts):
        self.starts = np.asarray(starts, dtype=np.int64)

    def forward(self, x):
        return kernels.segment_max(x, self.starts)

    def backward(self, arg, g, x):
        return (kernels.scatter_add_rows(g, arg, x.shape[0]),)

    def signature(self, arg):
        return arg.tobytes()


class SegmentMean(Op):
    name = "segment_mean"

    def __init__(self, starts):
        self.starts = np.asarray(starts, dtype=np.int64)
        self.counts = np.diff(self.starts)

    def forward(self, x):
        sums = np.add.reduceat(x, self.starts[:-1], axis=0)
        return sums / self.counts[:, None], None

    def backward(self, ctx, g, x):
        return (np.repeat(g / self.counts[:, None], self.counts, axis=0),)


# ---------------------------------------------------------------------------
# Builder functions


def add(a, b, name=None):
    return apply(Add(), a, b, name=name)


def sub(a, b, name=None):
    return apply(Sub(), a, b, name=name)


def mul(a, b, name=None):
    return apply(Mul(), a, b, name=name)


def matmul(a, b, name=None):
    return apply(MatMul(), a, b, name=name)


def linear(x, w, b=None, name=None):
    y = matmul(x, w, name=name)
    return add(y, b) if b is not None else y


def leaky_relu(x, slope=0.2, name=None):
    return apply(LeakyReLU(slope), x, name=name)


def relu(x, name=None):
    return apply(LeakyReLU(0.0), x, name=name)


def tanh(x, name=None):
    return apply(Tanh(), x, name=name)


def bounded(x, bounds, name=None):
    """Odd, bounded activation ``bounds * tanh(x)`` for angle outputs."""
    return mul(tanh(x), constant(np.asarray(bounds, dtype=np.float64)), name=name)


def concat(nodes: Sequence[Node], axis=1, name=None):
    return apply(Concat(axis), *nodes, name=name)


def slice_(x, start, stop, axis=1, name=None):
    return apply(Slice(axis, start, stop), x, name=name)


def take_rows(x, index, name=None):
    return apply(TakeRows(index), x, name=name)


def reshape(x, shape, name=None):
    return apply(Reshape(shape), x, name=name)


def sum_(x, name=None):
    return apply(Sum(), x, name=name)


def mean(x, name=None):
    return apply(Mean(), x, name=name)


def row_norm(x, name=None):
    return apply(RowNorm(), x, name=name)


def l2_normalize(x, name=None):
    return apply(L2Normalize(), x, name=name)


def batch_norm(x, gamma, beta, training=True, running_mean=None, running_var=None, eps=1e-5, name=None):
    return apply(BatchNorm(training, running_mean, running_var, eps), x, gamma, beta, name=name)


def knn(x, k, starts, name=None):
    return apply(Knn(k, starts), x, name=name)


def gather_max(x, nbr, name=None):
    return apply(GatherMax(), x, nbr, name=name)


def segment_max(x, starts, name=None):
    return apply(SegmentMax(starts), x, name=name)


def segment_mean(x, starts, name=None):
    return apply(SegmentMean(starts), x, name=name)


# ---------------------------------------------------------------------------
# Graph traversal


def topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def leaves(root: Node) -> list[Node]:
    return [n for n in topo_order(root) if n.op is None and n.requires_grad]


def forward(root: Node, order: list[Node] | None = None) -> np.ndarray:
    """Re-evaluate every op node below ``root`` from the current leaf values."""
    for node in order if order is not None else topo_order(root):
        if node.op is None:
            continue
        vals = [n.value for n in node.inputs]
        try:
            node.value, node.ctx = node.op.forward(*vals)
        except (ValueError, IndexError) as exc:
            raise GraphError(f"{node.op.name} node {node.name or ''} failed: {exc}") from exc
    return root.value


def backward(root: Node, order: list[Node] | None = None) -> dict[Node, np.ndarray]:
    """Gradients of a scalar root for every leaf that requires them."""
    if np.size(root.value) != 1:
        raise GraphError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
    order = order if order is not None else topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value, dtype=np.float64)
    for node in reversed(order):
        if node.op is None or node.grad is None or not node.requires_grad:
            continue
        grads = node.op.backward(node.ctx, node.grad, *[n.value for n in node.inputs])
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
    out = {}
    for node in order:
        if node.op is None and node.requires_grad:
            out[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def _signature(order):
    parts = []
    for node in order:
        if node.op is not None:
            s = node.op.signature(node.ctx)
            if s is not None:
                parts.append(s)
    return b"|".join(parts)


@dataclass
class FDReport:
    max_rel_error: float
    checked: int
    excluded: int
    worst: tuple | None = None


def finite_difference_report(
    root: Node,
    epsilon: float = 1e-6,
    targets: Iterable[Node] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    richardson: bool = False,
) -> FDReport:
    """Compare :func:`backward` with central differences.

    Coordinates whose perturbation flips any discrete choice in the graph
    (argmax winners, kNN sets, rectifier sides) are excluded.  ``max_coords``
    samples that many coordinates per leaf instead of checking all of them.
    With ``richardson`` the quotients at ``epsilon`` and ``epsilon / 2`` are
    combined, cancelling the second-order truncation term; this lets a larger
    step keep rounding noise down on deep, strongly curved graphs.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    order = topo_order(root)
    forward(root, order)
    base_sig = _signature(order)
    analytic = backward(root, order)
    targets = list(targets) if targets is not None else list(analytic)
    rng = np.random.default_rng(seed)
    steps = (epsilon, epsilon / 2) if richardson else (epsilon,)
    worst, worst_at, checked, excluded = 0.0, None, 0, 0
    for node in targets:
        flat = node.value.reshape(-1)
        grad = analytic[node].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            quotients, noise, flipped = [], 0.0, False
            for h in steps:
                flat[c] = orig + h
                fp = float(forward(root, order))
                flipped |= _signature(order) != base_sig
                flat[c] = orig - h
                fm = float(forward(root, order))
                flipped |= _signature(order) != base_sig
                quotients.append((fp - fm) / (2.0 * h))
                # below this the difference quotient is rounding noise
                noise = max(noise, 64.0 * np.finfo(np.float64).eps * (abs(fp) + abs(fm)) / (2.0 * h))
            flat[c] = orig
            if flipped:
                excluded += 1
                continue
            num = quotients[0] if len(quotients) == 1 else (4.0 * quotients[1] - quotients[0]) / 3.0
            ana = float(grad[c])
            if max(abs(num), abs(ana)) <= max(noise, 1e-10):
                continue
            checked += 1
            rel = abs(num - ana) / max(abs(num), abs(ana))
            if rel > worst:
                worst, worst_at = rel, (node.name, int(c), ana, num)
    forward(root, order)
    return FDReport(worst, checked, excluded, worst_at)


def finite_difference_check(root: Node, epsilon: float = 1e-6, **kw) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return finite_difference_report(root, epsilon, **kw).max_rel_error


# ---------------------------------------------------------------------------
# Optimiser


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, hyper: AdamConfig = AdamConfig()):
    """One Adam step with decoupled weight decay.

    Only names present in ``grads`` are touched; the input dicts are not
    mutated.  Returns ``(new_params, new_state)``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        p = params[name]
        m = m_all.get(name)
        v = v_all.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        upd = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay:
            upd = upd + hyper.lr * hyper.weight_decay * p
        new_params[name] = p - upd
        m_all[name], v_all[name] = m, v
    return new_params, AdamState(step, m_all, v_all)


def value_and_grad(fn: Callable[..., Node], params: dict, *args, **kw):
    """Bind ``params`` as leaves, build ``fn(leaves, ...)`` and differentiate."""
    bound = {name: leaf(v, name=name) for name, v in params.items()}
    root = fn(bound, *args, **kw)
    grads = backward(root)
    return float(root.value), {name: grads[n] for name, n in bound.items() if n in grads}, root
