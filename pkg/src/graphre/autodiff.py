"""Minimal reverse-mode differentiation on numpy arrays.

The engine records a graph of :class:`Tensor` operations and supports
higher-order gradients: when ``create_graph=True`` the backward pass is itself
recorded, so gradients of gradients (needed to differentiate through an
unrolled training loop) come for free.

Graph propagation matrices enter through :class:`SparseOperator`. An operator
marked ``requires_grad`` receives its gradient as a :class:`LowRank` sum of
outer products rather than a dense matrix; the caller materialises it once.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

_GRAD_ENABLED = True


@contextlib.contextmanager
def grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def detach(self):
        return Tensor(self.value)

    def item(self):
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Accumulate first-order gradients into ``.grad`` of every leaf."""
        leaves = [n for n in _toposort([self]) if n.requires_grad and n._backward is None]
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            if g is None:
                continue
            g = g.dense() if isinstance(g, LowRank) else g.value
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


@dataclass
class LowRank:
    """Gradient of a sparse operator, stored as ``sum_i left_i @ right_i.T``."""

    shape: tuple
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)

    def add(self, other):
        if isinstance(other, LowRank):
            return LowRank(self.shape, self.left + other.left, self.right + other.right)
        return Tensor(self.dense() + other.value)

    __add__ = add

    @property
    def rank(self):
        return sum(l.shape[1] for l in self.left)

    def dense(self):
        """Materialise the sum.

        Factors are grouped by the set of rows where the left factor is
        nonzero; gradients flowing through a training loss on a few labelled
        nodes are row-sparse, so most of the product runs on a row subset.
        """
        out = np.zeros(self.shape)
        groups = {}
        for l, r in zip(self.left, self.right):
            mask = np.any(l != 0, axis=1)
            entry = groups.setdefault(mask.tobytes(), (mask, [], []))
            entry[1].append(l)
            entry[2].append(r)
        for mask, ls, rs in groups.values():
            rows = np.flatnonzero(mask)
            if rows.size == 0:
                continue
            right = np.hstack(rs)
            if rows.size == self.shape[0]:
                out += np.hstack(ls) @ right.T
            else:
                out[rows] += np.hstack([l[rows] for l in ls]) @ right.T
        return out


class SparseOperator:
    """A (possibly differentiable) sparse matrix that multiplies tensors from the left."""

    __slots__ = ("matrix", "requires_grad", "transposed", "_base", "_t")

    def __init__(self, matrix, requires_grad=False, _base=None, transposed=False):
        self.matrix = matrix if isinstance(matrix, sp.csr_matrix) and matrix.dtype == np.float64 \
            else sp.csr_matrix(matrix, dtype=np.float64)
        self.requires_grad = requires_grad
        self.transposed = transposed
        self._base = _base if _base is not None else self
        self._t = None

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def T(self):
        if self._t is None:
            self._t = SparseOperator(self.matrix.T.tocsr(), self.requires_grad, _base=self._base,
                                     transposed=not self.transposed)
            self._t._t = self
        return self._t

    def __matmul__(self, other):
        return spmm(self, other)


# ---------------------------------------------------------------------------
# primitive operations

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1)
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def add(a, b):
    a, b = _lift(a), _lift(b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _node(a.value + b.value, (a, b), backward)


def neg(a):
    return _node(-a.value, (a,), lambda g, needs: (neg(g),))


def scale(a, c):
    c = float(c)
    return _node(a.value * c, (a,), lambda g, needs: (scale(g, c),))


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def backward(g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _node(a.value * b.value, (a, b), backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)

    def backward(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _node(a.value @ b.value, (a, b), backward)


def transpose(a):
    return _node(a.value.T, (a,), lambda g, needs: (transpose(g),))


def reshape(a, shape):
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g, needs: (reshape(g, old),))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else axis
            kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def broadcast_to(a, shape):
    src = a.shape
    return _node(np.broadcast_to(a.value, shape).copy(), (a,), lambda g, needs: (_unbroadcast(g, src),))


def relu(a):
    mask = Tensor((a.value > 0).astype(np.float64))
    return _node(a.value * mask.value, (a,), lambda g, needs: (mul(g, mask),))


def dropout(a, rate, rng, training=True):
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not training or rate <= 0:
        return a
    keep = 1.0 - rate
    mask = Tensor((rng.random(a.shape) < keep) / keep)
    return mul(a, mask)


def exp(a):
    out = _node(np.exp(a.value), (a,), None)
    if out.requires_grad:
        out._backward = lambda g, needs: (mul(g, out),)
    return out


def softmax(a):
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = _node(e / e.sum(axis=1, keepdims=True), (a,), None)
    if out.requires_grad:
        def backward(g, needs):
            inner = tsum(mul(g, out), axis=1, keepdims=True)
            return (mul(out, add(g, neg(inner))),)
        out._backward = backward
    return out


def log_softmax(a):
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))

    def backward(g, needs):
        return (add(g, neg(mul(softmax(a), tsum(g, axis=1, keepdims=True)))),)

    return _node(z - lse, (a,), backward)


def spmm(op: SparseOperator, b):
    """``op.matrix @ b`` for a sparse operator and a dense tensor."""
    b = _lift(b)
    value = op.matrix @ b.value
    parents = (op, b)

    def backward(g, needs):
        g_op = None
        if needs[0]:
            # Y = P B  -> dP = G B^T ;  Y = P^T B -> dP = B G^T
            if op.transposed:
                g_op = LowRank(op._base.shape, [b.value], [g.value])
            else:
                g_op = LowRank(op._base.shape, [g.value], [b.value])
        g_b = spmm(op.T, g) if needs[1] else None
        return g_op, g_b

    out = Tensor(value)
    if _GRAD_ENABLED and (op.requires_grad or b.requires_grad):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def cross_entropy(logits, labels, nodes):
    """Mean softmax cross-entropy over ``nodes`` with integer ``labels`` (length N)."""
    logits = _lift(logits)
    nodes = np.asarray(nodes, dtype=np.int64)
    weight = np.zeros(logits.shape)
    weight[nodes, np.asarray(labels)[nodes]] = 1.0 / max(len(nodes), 1)
    return neg(tsum(mul(log_softmax(logits), Tensor(weight))))


# ---------------------------------------------------------------------------
# backward pass

def _key(node):
    return node._base if isinstance(node, SparseOperator) else node


def _toposort(roots, stop=frozenset()):
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for p in getattr(node, "_parents", ()):
            if p.requires_grad and id(_key(p)) not in seen:
                stack.append((_key(p), False))
    return order


def grad(output, inputs, grad_output=None, create_graph=False, allow_unused=False,
         stop_at_inputs=False):
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    Returns a list of :class:`Tensor` (or :class:`LowRank` for sparse
    operators). With ``create_graph`` the returned tensors are themselves
    differentiable. ``stop_at_inputs`` skips the history behind the inputs;
    it is only correct when no input depends on another.
    """
    inputs = list(inputs)
    targets = {id(_key(x)) for x in inputs}
    order = _toposort([output], stop=targets if stop_at_inputs else frozenset())
    # nodes through which some input is reachable
    useful = set()
    for node in order:
        if id(node) in targets or any(id(_key(p)) in useful for p in getattr(node, "_parents", ())):
            useful.add(id(node))
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.value))
    grads = {id(output): grad_output}
    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or getattr(node, "_backward", None) is None or id(node) not in useful:
                continue
            if isinstance(g, LowRank):  # pragma: no cover - operators have no backward
                g = Tensor(g.dense())
            parents = node._parents
            needs = tuple(id(_key(p)) in useful and p.requires_grad for p in parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(parents, pgrads, needs):
                if not need or pg is None:
                    continue
                k = id(_key(p))
                prev = grads.get(k)
                if prev is None:
                    grads[k] = pg
                elif isinstance(prev, LowRank):
                    grads[k] = prev.add(pg) if isinstance(pg, LowRank) else Tensor(prev.dense() + pg.value)
                elif isinstance(pg, LowRank):
                    grads[k] = Tensor(prev.value + pg.dense())
                else:
                    grads[k] = add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(id(_key(x)))
        if g is None and not allow_unused:
            if isinstance(x, SparseOperator):
                g = LowRank(x.shape)
            else:
                g = Tensor(np.zeros_like(x.value))
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# gradient checking

@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a, b, floor=1e-10):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b)), initial=0.0))


def numeric_grad(f, arrays, index, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def _random_sparse(rng, n, m, density=0.4):
    mat = sp.random(n, m, density=density, random_state=np.random.RandomState(rng.integers(2**31)))
    return mat.tocsr()


def _gradcheck_cases(rng):
    """Scalar test functions for each primitive: name -> (fn(*tensors) -> Tensor, inputs)."""
    proj = lambda shape: Tensor(rng.standard_normal(shape))
    S = SparseOperator(_random_sparse(rng, 5, 4))
    mask = rng.random((4, 3)) < 0.5
    labels = rng.integers(0, 3, size=5)
    cases = {
        "matmul": (lambda a, b, r=proj((4, 3)): tsum(mul(matmul(a, b), r)),
                   [rng.standard_normal((4, 4)), rng.standard_normal((4, 3))]),
        "spmm": (lambda b, r=proj((5, 3)): tsum(mul(spmm(S, b), r)), [rng.standard_normal((4, 3))]),
        "relu": (lambda a, r=proj((4, 3)): tsum(mul(relu(a), r)), [rng.uniform(0.1, 2.0, (4, 3))]),
        "dropout": (lambda a, r=proj((4, 3)): tsum(mul(dropout(a, 0.5, None, training=False), r)),
                    [rng.standard_normal((4, 3))]),
        "dropout_train": (lambda a, r=proj((4, 3)): tsum(mul(mul(a, Tensor(mask / 0.5)), r)),
                          [rng.standard_normal((4, 3))]),
        "softmax_cross_entropy": (lambda z: cross_entropy(z, labels, np.arange(5)),
                                  [rng.standard_normal((5, 3))]),
        "add": (lambda a, b, r=proj((4, 3)): tsum(mul(add(a, b), r)),
                [rng.standard_normal((4, 3)), rng.standard_normal((1, 3))]),
        "scale": (lambda a, r=proj((4, 3)): tsum(mul(scale(a, -1.7), r)), [rng.standard_normal((4, 3))]),
        "mul": (lambda a, b: tsum(mul(a, b)), [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]),
        "softmax": (lambda a, r=proj((4, 3)): tsum(mul(softmax(a), r)), [rng.standard_normal((4, 3))]),
        "log_softmax": (lambda a, r=proj((4, 3)): tsum(mul(log_softmax(a), r)), [rng.standard_normal((4, 3))]),
        "transpose": (lambda a, r=proj((3, 4)): tsum(mul(transpose(a), r)), [rng.standard_normal((4, 3))]),
        "sum": (lambda a, r=proj((1, 3)): tsum(mul(tsum(a, axis=0, keepdims=True), r)),
                [rng.standard_normal((4, 3))]),
    }
    return cases


PRIMITIVES = tuple(_gradcheck_cases(np.random.default_rng(0)))


def gradient_check(op_name: str, point=0, tolerance: float = 1e-6, h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of a primitive with central differences.

    ``point`` is either a seed for random inputs or an explicit list of input
    arrays for the named primitive.
    """
    if isinstance(point, (int, np.integer)):
        fn, arrays = _gradcheck_cases(np.random.default_rng(point))[op_name]
    else:
        fn, _ = _gradcheck_cases(np.random.default_rng(0))[op_name]
        arrays = [np.array(a, dtype=np.float64) for a in point]
    return check_function(op_name, fn, arrays, tolerance, h)


def check_function(name, fn, arrays, tolerance=1e-6, h=1e-5) -> GradCheckReport:
    """Gradient check of an arbitrary scalar tensor function of dense arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = [g.value for g in grad(fn(*leaves), leaves)]

    # no no_grad() here: fn may itself call grad() (e.g. an unrolled training step)
    def scalar(*xs):
        return float(fn(*[Tensor(x) for x in xs]).value)

    rel, abs_ = 0.0, 0.0
    for i in range(len(arrays)):
        num = numeric_grad(scalar, arrays, i, h)
        rel = max(rel, rel_error(analytic[i], num))
        abs_ = max(abs_, float(np.max(np.abs(analytic[i] - num), initial=0.0)))
    return GradCheckReport(name, rel, abs_, tolerance)
