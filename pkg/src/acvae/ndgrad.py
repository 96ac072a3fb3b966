"""Dense-array computation with reverse-mode differentiation.

A small tape-based engine on top of numpy, sufficient for residual MLPs and
the Gaussian/mixture log-density arithmetic the rest of the package needs.
Expressions are built by calling the ops in this module on a mix of `Node`s
and plain arrays; anything without a `Node` in its inputs falls through to
numpy, so the same code evaluates both differentiably and as plain math.

A `Graph` wraps a pure function of named parameters (plus constant inputs);
`evaluate`, `gradient`, and `grad_check` run it. Nodes record primitive ops
in execution order, which is a topological order of the (acyclic) expression
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """An op was applied to operands with incompatible shapes."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


# ---------------------------------------------------------------------------
# Tape nodes


class Node:
    """One value in an expression, with enough structure to backprop.

    `parents` are the Node inputs of the op that produced this value and
    `vjp` maps the output cotangent to one cotangent per parent. Leaves
    (parameters) have no parents.
    """

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value: np.ndarray, parents: tuple = (), vjp=None):
        self.value = np.asarray(value)
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    # arithmetic sugar; each delegates to the module-level op
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={self.vjp is None})"


def value_of(x) -> np.ndarray:
    """Underlying array of a Node, or `x` itself as an array."""
    if isinstance(x, Node):
        return x.value
    return np.asarray(x)


def is_node(x) -> bool:
    return isinstance(x, Node)


def stop_gradient(x):
    """Detach `x` from the tape; gradients do not flow past this point."""
    return value_of(x)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar `root`; returns id(node) -> grad."""
    if root.value.ndim != 0:
        raise ShapeError(
            f"backward requires a scalar root, got shape {root.value.shape}"
        )
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.value.dtype)}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


# ---------------------------------------------------------------------------
# Op plumbing


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, da, db):
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    an, bn = isinstance(a, Node), isinstance(b, Node)
    if not (an or bn):
        return out
    parents = tuple(x for x, keep in ((a, an), (b, bn)) if keep)

    def vjp(g):
        grads = []
        if an:
            grads.append(_unbroadcast(da(g, av, bv, out), av.shape))
        if bn:
            grads.append(_unbroadcast(db(g, av, bv, out), bv.shape))
        return tuple(grads)

    return Node(out, parents, vjp)


def _unary(a, fwd, da):
    av = value_of(a)
    out = fwd(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), lambda g: (da(g, av, out),))


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives


def add(a, b):
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b):
    return _binary(
        a, b, np.multiply, lambda g, av, bv, _: g * bv, lambda g, av, bv, _: g * av
    )


def div(a, b):
    return _binary(
        a,
        b,
        np.divide,
        lambda g, av, bv, _: g / bv,
        lambda g, av, bv, out: -g * out / bv,
    )


def neg(a):
    return _unary(a, np.negative, lambda g, av, out: -g)


def power(a, p: float):
    if isinstance(p, Node):
        raise TypeError("power only supports constant exponents")
    return _unary(
        a, lambda av: np.power(av, p), lambda g, av, out: g * p * np.power(av, p - 1)
    )


def exp(a):
    return _unary(a, np.exp, lambda g, av, out: g * out)


def log(a):
    return _unary(a, np.log, lambda g, av, out: g / av)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, av, out: g / (2.0 * out))


def tanh(a):
    return _unary(a, np.tanh, lambda g, av, out: g * (1.0 - out * out))


def relu(a):
    # subgradient at 0 is 0
    return _unary(
        a,
        lambda av: np.maximum(av, 0.0),
        lambda g, av, out: g * (av > 0.0),
    )


def sigmoid(a):
    def fwd(av):
        av = np.asarray(av)
        e = np.exp(-np.abs(av))
        return np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _unary(a, fwd, lambda g, av, out: g * out * (1.0 - out))


def softplus(a):
    return _unary(
        a,
        lambda av: np.logaddexp(0.0, av),
        lambda g, av, out: g * value_of(sigmoid(av)),
    )


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2 operands, got {av.shape} @ {bv.shape}"
        )
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")

    def da(g, av, bv, _):
        return g @ np.swapaxes(bv, -1, -2)

    def db(g, av, bv, _):
        return np.swapaxes(av, -1, -2) @ g

    return _binary(a, b, np.matmul, da, db)


def affine(x, w, b):
    """x @ w + b with a broadcast bias; the workhorse of every MLP layer."""
    return add(matmul(x, w), b)


def take(a, idx):
    """numpy-style indexing with a constant index; scatter-add on backward."""

    def da(g, av, out):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return z

    return _unary(a, lambda av: av[idx], da)


def reshape(a, shape):
    av = value_of(a)
    return _unary(
        a, lambda v: v.reshape(shape), lambda g, v, out: g.reshape(av.shape)
    )


def broadcast_to(a, shape):
    return _unary(
        a,
        lambda v: np.broadcast_to(v, shape),
        lambda g, v, out: _unbroadcast(g, v.shape),
    )


def swapaxes(a, ax1: int, ax2: int):
    return _unary(
        a,
        lambda v: np.swapaxes(v, ax1, ax2),
        lambda g, v, out: np.swapaxes(g, ax1, ax2),
    )


def concat(parts: Sequence, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(p, Node) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(p for p in parts if isinstance(p, Node))

    def vjp(g):
        grads = []
        for i, p in enumerate(parts):
            if isinstance(p, Node):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(sl)])
        return tuple(grads)

    return Node(out, parents, vjp)


def _restore_axes(g, av_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, av_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(av_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, av_shape)


def vsum(a, axis=None, keepdims: bool = False):
    return _unary(
        a,
        lambda v: np.sum(v, axis=axis, keepdims=keepdims),
        lambda g, v, out: _restore_axes(g, v.shape, axis, keepdims),
    )


def vmean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    n = av.size if axis is None else np.prod(
        [av.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return _unary(
        a,
        lambda v: np.mean(v, axis=axis, keepdims=keepdims),
        lambda g, v, out: _restore_axes(g, v.shape, axis, keepdims) / n,
    )


def vmax(a, axis=None, keepdims: bool = False):
    def da(g, av, out):
        full = _restore_axes(g, av.shape, axis, keepdims)
        omax = _restore_axes(out, av.shape, axis, keepdims)
        mask = av == omax
        counts = mask.sum(axis=axis, keepdims=True)
        return full * mask / counts

    return _unary(a, lambda v: np.max(v, axis=axis, keepdims=keepdims), da)


def logsumexp(a, axis=-1, keepdims: bool = False):
    """Stable log-sum-exp; the shift is detached so gradients stay exact."""
    m = stop_gradient(vmax(a, axis=axis, keepdims=True))
    out = log(vsum(exp(sub(a, m)), axis=axis, keepdims=True)) + m
    if keepdims:
        return out
    return reshape(out, np.squeeze(value_of(out), axis=axis).shape)


def diag_part(a):
    """Last-two-axes diagonal: (..., d, d) -> (..., d)."""

    def da(g, av, out):
        z = np.zeros_like(av)
        d = av.shape[-1]
        idx = np.arange(d)
        z[..., idx, idx] = g
        return z

    return _unary(a, lambda v: np.einsum("...ii->...i", v), da)


def diag_embed(a):
    """(..., d) -> (..., d, d) with the values on the diagonal."""

    def fwd(v):
        d = v.shape[-1]
        z = np.zeros(v.shape + (d,), dtype=v.dtype)
        idx = np.arange(d)
        z[..., idx, idx] = v
        return z

    return _unary(a, fwd, lambda g, v, out: np.einsum("...ii->...i", g))


def scatter_tril(a, d: int):
    """Pack (..., d*(d-1)/2) strictly-lower entries into (..., d, d)."""
    rows, cols = np.tril_indices(d, k=-1)

    def fwd(v):
        z = np.zeros(v.shape[:-1] + (d, d), dtype=v.dtype)
        z[..., rows, cols] = v
        return z

    return _unary(a, fwd, lambda g, v, out: g[..., rows, cols])


def chol_solve_vec(l_mat, b):
    """Solve L y = b for y, with L lower triangular; (..., d, d) x (..., d)."""

    def fwd(lv, bv):
        return np.linalg.solve(lv, bv[..., None])[..., 0]

    def solve_t(lv, g):
        return np.linalg.solve(np.swapaxes(lv, -1, -2), g[..., None])[..., 0]

    def da(g, lv, bv, out):
        gb = solve_t(lv, g)
        grad = -gb[..., :, None] * out[..., None, :]
        return grad * np.tril(np.ones(lv.shape[-2:], dtype=lv.dtype))

    def db(g, lv, bv, out):
        return solve_t(lv, g)

    return _binary(l_mat, b, fwd, da, db)


# ---------------------------------------------------------------------------
# Parameter sets


class ParamSet:
    """Named parameter tensors in a fixed declared order.

    Arrays are marked read-only on entry; updates produce new ParamSets
    (single-writer training loops swap whole sets).
    """

    def __init__(self, items: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._items: dict[str, np.ndarray] = {}
        for name, arr in pairs:
            if name in self._items:
                raise ValueError(f"duplicate parameter name: {name!r}")
            arr = np.asarray(arr)
            arr.flags.writeable = False
            self._items[name] = arr

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._items.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet([(k, fn(k, v)) for k, v in self._items.items()])

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self._items)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        return ParamSet(
            [(k, updates.get(k, v)) for k, v in self._items.items()]
        )

    def astype(self, dtype) -> "ParamSet":
        return self.map(lambda _, v: v.astype(dtype))

    def n_elements(self) -> int:
        return int(sum(v.size for v in self._items.values()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    def __repr__(self):
        return f"ParamSet({len(self._items)} tensors, {self.n_elements()} elements)"


def merge_params(*sets: ParamSet) -> ParamSet:
    out: list[tuple[str, np.ndarray]] = []
    for ps in sets:
        out.extend(ps.items())
    return ParamSet(out)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return params.map(lambda _, v: np.zeros_like(v))


# ---------------------------------------------------------------------------
# Graphs


@dataclass(frozen=True)
class Graph:
    """A pure function of named parameters and fixed inputs.

    `fn(params, *inputs)` receives the parameters as leaf Nodes keyed by
    name and must combine them with the ops above; inputs pass through as
    plain arrays (constants).
    """

    fn: Callable
    name: str = ""


def _leaf_nodes(params: ParamSet) -> dict[str, Node]:
    return {name: Node(arr) for name, arr in params.items()}


def evaluate(graph: Graph, params: ParamSet, *inputs):
    """Run the graph; returns plain array(s). Deterministic and pure."""
    out = graph.fn(_leaf_nodes(params), *inputs)
    if isinstance(out, tuple):
        return tuple(value_of(o) for o in out)
    return value_of(out)


def gradient(graph: Graph, params: ParamSet, *inputs) -> ParamSet:
    """Reverse-mode gradients of a scalar graph w.r.t. every parameter."""
    _, grads = value_and_gradient(graph, params, *inputs)
    return grads


def value_and_gradient(graph: Graph, params: ParamSet, *inputs):
    leaves = _leaf_nodes(params)
    out = graph.fn(leaves, *inputs)
    if not isinstance(out, Node):
        out_v = np.asarray(value_of(out))
        if out_v.ndim != 0:
            raise ShapeError(
                f"gradient requires a scalar output, got shape {out_v.shape}"
            )
        return out_v, zeros_like_params(params)
    if out.value.ndim != 0:
        raise ShapeError(
            f"gradient requires a scalar output, got shape {out.value.shape}"
        )
    grads = backward(out)
    return out.value, params.map(
        lambda name, v: grads.get(id(leaves[name]), np.zeros_like(v))
    )


def grad_check(
    graph: Graph, params: ParamSet, inputs: Sequence = (), eps: float = 1e-5
) -> float:
    """Max relative error between reverse-mode and central differences.

    Relative error is |analytic - cd| / max(|analytic|, |cd|, 1e-8); a graph
    with no parameters vacuously returns 0.
    """
    analytic = gradient(graph, params, *inputs)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.ravel()
        for i in range(flat.size):
            delta = np.zeros_like(flat)
            delta[i] = eps
            bumped = delta.reshape(arr.shape)
            up = evaluate(graph, params.replace({name: arr + bumped}), *inputs)
            dn = evaluate(graph, params.replace({name: arr - bumped}), *inputs)
            cd = (up - dn) / (2.0 * eps)
            an = analytic[name].ravel()[i]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, float(err))
    return worst
