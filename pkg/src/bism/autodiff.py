"""Reverse-mode automatic differentiation on dense float64 arrays.

The graph is built eagerly: every operation on a `Node` records its parents and
a VJP rule. `grad` walks the graph in reverse topological order. VJP rules are
written in terms of the module's own operations, so when `grad` is called with
``retain_graph=True`` the returned gradients are themselves `Node`s and can be
differentiated again (score functions, Hessian-vector products, unrolled inner
updates all rely on this). With ``retain_graph=False`` the same rules run with
recording switched off and plain arrays come back.

Everything is float64. Operations accept `Node`s, numpy arrays, or Python
scalars; a plain array comes back whenever the result cannot require gradients,
which keeps non-recorded paths at raw numpy speed. Broadcasting follows numpy;
gradients are summed back onto the operand shape.

Graphs are confined to one thread. Nothing holds a reference to an interior
node after a non-retained backward, so dropping the output frees the graph.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError, SizeError

__all__ = [
    "Node", "leaf", "const", "no_grad", "set_debug", "value_of", "node_tally",
    "grad", "grad2", "hvp",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "broadcast_to", "asum", "amean", "square", "sqrt", "exp", "log", "tanh",
    "sigmoid", "softplus", "elu", "concat", "take", "logsumexp",
]

_REC = True      # recording flag; toggled by no_grad
_DEBUG = False   # eager non-finite checks at node creation
_NODE_TALLY = 0  # nodes created since import; cheap proxy for graph memory


def set_debug(flag: bool) -> None:
    """Debug mode checks every node value at creation instead of at backward."""
    global _DEBUG
    _DEBUG = bool(flag)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _REC
        self._saved = _REC
        _REC = False
        return self

    def __exit__(self, *exc):
        global _REC
        _REC = self._saved
        return False


def _arr(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def value_of(x) -> np.ndarray:
    """Detached float64 array behind a Node, array, or scalar."""
    return x.value if type(x) is Node else _arr(x)


def node_tally() -> int:
    """Running count of nodes created since import.

    Monotone; callers budget against the difference between two readings.
    """
    return _NODE_TALLY


class Node:
    """One value in the computation graph.

    `parents` holds only gradient-requiring inputs; `vjp` maps the incoming
    adjoint to one contribution per parent. Leaves have no vjp.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op", "_fin")
    __array_ufunc__ = None  # keep numpy from consuming Node operands

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="const"):
        global _NODE_TALLY
        self.value = _arr(value)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op
        self._fin = False
        _NODE_TALLY += 1
        if _DEBUG and not _is_finite(self.value):
            raise NumericError(f"non-finite value produced by op '{op}'")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> np.ndarray:
        return self.value

    def sum(self, axis=None, keepdims=False):
        return asum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return amean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def leaf(x) -> Node:
    """Gradient-requiring input node."""
    return Node(x, requires_grad=True, op="leaf")


def const(x) -> Node:
    return Node(x, op="const")


def _is_finite(v: np.ndarray) -> bool:
    # sum-based probe: any NaN/Inf makes the reduction non-finite
    return v.size == 0 or math.isfinite(float(v.sum()))


def _wants(x) -> bool:
    return type(x) is Node and x.requires_grad


def _rec(op, out, pairs):
    # pairs: [(parent node, adjoint contribution fn)]
    parents = tuple(p for p, _ in pairs)
    fns = tuple(f for _, f in pairs)
    if len(fns) == 1:
        f0 = fns[0]

        def vjp(g):
            return (f0(g),)
    else:

        def vjp(g):
            return tuple(f(g) for f in fns)

    return Node(out, parents, vjp, True, op)


def _unbroadcast(g, shape):
    gshape = g.value.shape if type(g) is Node else g.shape
    if gshape == shape:
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = asum(g, axis=tuple(range(extra)))
        gshape = gshape[extra:]
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and gshape[i] != 1)
    if axes:
        g = asum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if _REC:
        pairs = []
        if _wants(a):
            pairs.append((a, lambda g: _unbroadcast(g, av.shape)))
        if _wants(b):
            pairs.append((b, lambda g: _unbroadcast(g, bv.shape)))
        if pairs:
            return _rec("add", out, pairs)
    return out


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if _REC:
        pairs = []
        if _wants(a):
            pairs.append((a, lambda g: _unbroadcast(g, av.shape)))
        if _wants(b):
            pairs.append((b, lambda g: _unbroadcast(neg(g), bv.shape)))
        if pairs:
            return _rec("sub", out, pairs)
    return out


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if _REC:
        pairs = []
        if _wants(a):
            pairs.append((a, lambda g: _unbroadcast(mul(g, b), av.shape)))
        if _wants(b):
            pairs.append((b, lambda g: _unbroadcast(mul(g, a), bv.shape)))
        if pairs:
            return _rec("mul", out, pairs)
    return out


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if _REC:
        pairs = []
        if _wants(a):
            pairs.append((a, lambda g: _unbroadcast(div(g, b), av.shape)))
        if _wants(b):
            pairs.append((b, lambda g: _unbroadcast(neg(div(mul(g, a), square(b))), bv.shape)))
        if pairs:
            return _rec("div", out, pairs)
    return out


def neg(a):
    out = -value_of(a)
    if _REC and _wants(a):
        return _rec("neg", out, [(a, lambda g: neg(g))])
    return out


# ------------------------------------------------------------ linear algebra


def _mm2(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv
    if _REC:
        pairs = []
        if _wants(a):
            pairs.append((a, lambda g: _mm2(g, transpose(b))))
        if _wants(b):
            pairs.append((b, lambda g: _mm2(transpose(a), g)))
        if pairs:
            return _rec("matmul", out, pairs)
    return out


def matmul(a, b):
    """2-D matrix product; 1-D operands are promoted and squeezed like numpy."""
    an = value_of(a).ndim
    bn = value_of(b).ndim
    if an > 2 or bn > 2 or an == 0 or bn == 0:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got ndim {an} and {bn}")
    x = reshape(a, (1, -1)) if an == 1 else a
    y = reshape(b, (-1, 1)) if bn == 1 else b
    out = _mm2(x, y)
    if an == 1 and bn == 1:
        return reshape(out, ())
    if an == 1:
        return reshape(out, (value_of(out).shape[1],))
    if bn == 1:
        return reshape(out, (value_of(out).shape[0],))
    return out


def transpose(a):
    av = value_of(a)
    if av.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {av.shape}")
    out = av.T
    if _REC and _wants(a):
        return _rec("transpose", out, [(a, lambda g: transpose(g))])
    return out


# ------------------------------------------------------------- shape plumbing


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if _REC and _wants(a):
        orig = av.shape
        return _rec("reshape", out, [(a, lambda g: reshape(g, orig))])
    return out


def broadcast_to(a, shape):
    av = value_of(a)
    out = np.broadcast_to(av, shape)
    if _REC and _wants(a):
        orig = av.shape
        return _rec("broadcast", out, [(a, lambda g: _unbroadcast(g, orig))])
    return out


def take(a, idx):
    """Basic indexing/slicing; the adjoint scatters into zeros."""
    av = value_of(a)
    out = av[idx]
    if _REC and _wants(a):
        shape = av.shape
        return _rec("take", out, [(a, lambda g: _scatter(g, shape, idx))])
    return out


def _scatter(g, shape, idx):
    gv = value_of(g)
    out = np.zeros(shape)
    out[idx] = gv
    if _REC and _wants(g):
        return _rec("scatter", out, [(g, lambda g2: take(g2, idx))])
    return out


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if _REC:
        offsets = np.cumsum([0] + [v.shape[axis] for v in vals])
        pairs = []
        for i, p in enumerate(parts):
            if _wants(p):
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                sl = tuple(sl)
                pairs.append((p, lambda g, sl=sl: take(g, sl)))
        if pairs:
            return _rec("concat", out, pairs)
    return out


# ------------------------------------------------------------------ reductions


def asum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))
    if _REC and _wants(a):
        shape = av.shape
        if axis is None:
            kept = (1,) * av.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % av.ndim for ax in axes)
            kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

        def back(g):
            if not keepdims:
                g = reshape(g, kept)
            return broadcast_to(g, shape)

        return _rec("sum", out, [(a, back)])
    return out


def amean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= av.shape[ax % av.ndim]
    return mul(asum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- unary ops


def square(a):
    av = value_of(a)
    out = av * av
    if _REC and _wants(a):
        return _rec("square", out, [(a, lambda g: mul(g, mul(a, 2.0)))])
    return out


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    if _REC and _wants(a):
        node = Node(out, (a,), None, True, "sqrt")
        node.vjp = lambda g: (mul(g, div(0.5, node)),)
        return node
    return out


def exp(a):
    out = np.exp(value_of(a))
    if _REC and _wants(a):
        node = Node(out, (a,), None, True, "exp")
        node.vjp = lambda g: (mul(g, node),)
        return node
    return out


def log(a):
    out = np.log(value_of(a))
    if _REC and _wants(a):
        return _rec("log", out, [(a, lambda g: div(g, a))])
    return out


def tanh(a):
    out = np.tanh(value_of(a))
    if _REC and _wants(a):
        node = Node(out, (a,), None, True, "tanh")
        node.vjp = lambda g: (mul(g, sub(1.0, square(node))),)
        return node
    return out


def sigmoid(a):
    out = expit(value_of(a))
    if _REC and _wants(a):
        node = Node(out, (a,), None, True, "sigmoid")
        node.vjp = lambda g: (mul(g, mul(node, sub(1.0, node))),)
        return node
    return out


def softplus(a):
    out = np.logaddexp(0.0, value_of(a))
    if _REC and _wants(a):
        return _rec("softplus", out, [(a, lambda g: mul(g, sigmoid(a)))])
    return out


def elu(a):
    av = value_of(a)
    out = np.where(av > 0.0, av, np.expm1(av))
    if _REC and _wants(a):
        mask = (av > 0.0).astype(np.float64)
        node = Node(out, (a,), None, True, "elu")
        # slope is 1 on the positive side, exp(x) = elu(x)+1 on the negative side
        node.vjp = lambda g: (mul(g, add(mask, mul(1.0 - mask, add(node, 1.0)))),)
        return node
    return out


def logsumexp(a, axis=None, keepdims=False):
    """Stable log-sum-exp; the max shift is detached, so gradients stay exact."""
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = exp(sub(a, m))
    s = log(asum(shifted, axis=axis, keepdims=True))
    out = add(s, m)
    if not keepdims:
        if axis is None:
            out = reshape(out, ())
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(ax % av.ndim for ax in axes)
            kept = tuple(d for i, d in enumerate(value_of(out).shape) if i not in axes)
            out = reshape(out, kept)
    return out


# -------------------------------------------------------------- differentiation


def _check_finite(node: Node) -> None:
    if node._fin:
        return
    if not _is_finite(node.value):
        raise NumericError(f"non-finite value produced by op '{node.op}'")
    node._fin = True


def _toposort(output: Node) -> list[Node]:
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            # post-order: parents precede children, so the first op that
            # produced a non-finite value is the one reported
            _check_finite(node)
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return topo


def grad(output, inputs, retain_graph: bool = False):
    """Gradients of a scalar output with respect to each input node.

    Inputs unreachable from the output get zero gradients. With
    ``retain_graph=True`` the results are Nodes that support further
    differentiation; otherwise plain arrays.
    """
    inputs = list(inputs)
    ov = value_of(output)
    if ov.size != 1:
        raise ContractError(f"grad target must be scalar, got shape {ov.shape}")

    def zero_for(n):
        z = np.zeros_like(value_of(n))
        return const(z) if retain_graph else z

    if not (type(output) is Node and output.requires_grad):
        if not _is_finite(ov):
            raise NumericError("non-finite value in differentiation target")
        return [zero_for(n) for n in inputs]

    wanted = {id(n) for n in inputs}
    results: dict[int, object] = {}
    topo = _toposort(output)
    seed_val = np.ones_like(ov)
    seed = const(seed_val) if retain_graph else seed_val
    grads: dict[int, object] = {id(output): seed}

    ctx = no_grad() if not retain_graph else _nullctx()
    with ctx:
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                results[id(node)] = g
            if node.vjp is None:
                continue
            contribs = node.vjp(g)
            for p, c in zip(node.parents, contribs):
                if c is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = c if prev is None else add(prev, c)

    out = []
    for n in inputs:
        r = results.get(id(n))
        if r is None:
            r = zero_for(n)
        elif retain_graph and type(r) is not Node:
            r = const(r)
        elif not retain_graph:
            r = value_of(r)
        out.append(r)
    return out


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def grad2(output, input) -> np.ndarray:
    """Dense Hessian of a scalar output over the flattened input (dim <= 32)."""
    iv = value_of(input)
    d = iv.size
    if d > 32:
        raise SizeError(f"grad2 materializes a {d}x{d} Hessian; limit is 32")
    (g,) = grad(output, [input], retain_graph=True)
    flat = reshape(g, (d,))
    rows = []
    for i in range(d):
        (row,) = grad(flat[i], [input])
        rows.append(np.asarray(row).reshape(d))
    return np.stack(rows)


def hvp(output, input, vector) -> np.ndarray:
    """Hessian-vector product via two passes; the Hessian is never formed."""
    vec = _arr(vector)
    iv = value_of(input)
    if vec.shape != iv.shape:
        raise ShapeError(f"hvp vector shape {vec.shape} != input shape {iv.shape}")
    (g,) = grad(output, [input], retain_graph=True)
    s = asum(mul(g, vec))
    (h,) = grad(s, [input])
    return np.asarray(h)
