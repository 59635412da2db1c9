"""Reverse-mode differentiation on a flat tape, plus the drift network built on it.

All values are float64 numpy arrays. A ``Tape`` records primitive operations as
they execute (define-by-run); ``grad`` walks the records backwards accumulating
vector-Jacobian products. The primitive functions below dispatch on their
argument types, so code written against them runs unchanged on raw arrays
(no tape, used by evaluation rollouts) or on ``Node`` values (traced, used by
the training losses).

The primitive set is deliberately small: add, mul, matmul, softplus, exp, log,
sum, square, gather, concat, plus two extern hooks for hand-coded target
log-densities/scores (their local VJPs are the analytic score and
Hessian-vector product, so no higher-order differentiation is ever needed) and
a row-mask used to drop diverged trajectories from a batch loss.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

Array = np.ndarray

# ParamSet: flat named collection of trainable float64 arrays.
ParamSet = dict


def _as_value(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One tape record: a value plus how it was computed."""

    __slots__ = ("tape", "idx", "val", "op", "parents", "aux")

    def __init__(self, tape: "Tape", idx: int, val: Array, op: str, parents, aux):
        self.tape = tape
        self.idx = idx
        self.val = val
        self.op = op
        self.parents = parents
        self.aux = aux

    @property
    def shape(self):
        return self.val.shape

    # Operator sugar so generic numeric code reads naturally in both modes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Node(idx={self.idx}, op={self.op}, shape={self.val.shape})"


class Tape:
    """Append-only record of Nodes; parent indices are always smaller."""

    def __init__(self):
        self.records: list[Node] = []

    def _push(self, val: Array, op: str, parents=(), aux=None) -> Node:
        node = Node(self, len(self.records), _as_value(val), op, tuple(parents), aux)
        self.records.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(value, "const")

    def leaf(self, value) -> Node:
        return self._push(value, "leaf")

    def lift(self, params: Mapping[str, Array]) -> dict[str, Node]:
        """Box every parameter array as a leaf node on this tape."""
        return {name: self.leaf(np.asarray(arr, dtype=np.float64))
                for name, arr in params.items()}


def is_node(x) -> bool:
    return isinstance(x, Node)


def value(x) -> Array:
    """Unbox a Node (or pass a raw array through)."""
    return x.val if isinstance(x, Node) else _as_value(x)


def tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a broadcasted gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives. Each dispatches: all-raw arguments -> plain numpy, any Node
# argument -> a new Node on that tape.
# ---------------------------------------------------------------------------

def add(a, b):
    tape = tape_of(a, b)
    if tape is None:
        return _as_value(a) + _as_value(b)
    if is_node(a) and is_node(b):
        return tape._push(a.val + b.val, "add", (a, b))
    if is_node(a):
        return tape._push(a.val + _as_value(b), "add", (a,))
    return tape._push(_as_value(a) + b.val, "add", (b,))


def mul(a, b):
    tape = tape_of(a, b)
    if tape is None:
        return _as_value(a) * _as_value(b)
    if is_node(a) and is_node(b):
        return tape._push(a.val * b.val, "mul", (a, b))
    if is_node(a):
        c = _as_value(b)
        return tape._push(a.val * c, "mul", (a,), c)
    c = _as_value(a)
    return tape._push(c * b.val, "mul", (b,), c)


def matmul(a, b):
    """Matrix product; either operand may be a constant array."""
    tape = tape_of(a, b)
    if tape is None:
        return _as_value(a) @ _as_value(b)
    av, bv = value(a), value(b)
    out = av @ bv
    if is_node(a) and is_node(b):
        return tape._push(out, "matmul", (a, b))
    if is_node(a):
        return tape._push(out, "matmul", (a,), ("right_const", bv))
    return tape._push(out, "matmul", (b,), ("left_const", av))


def softplus(x):
    if not is_node(x):
        return np.logaddexp(0.0, _as_value(x))
    return x.tape._push(np.logaddexp(0.0, x.val), "softplus", (x,))


def exp(x):
    if not is_node(x):
        return np.exp(_as_value(x))
    return x.tape._push(np.exp(x.val), "exp", (x,))


def log(x):
    if not is_node(x):
        return np.log(_as_value(x))
    return x.tape._push(np.log(x.val), "log", (x,))


def square(x):
    if not is_node(x):
        return np.square(_as_value(x))
    return x.tape._push(np.square(x.val), "square", (x,))


def ssum(x, axis=None, keepdims=False):
    if not is_node(x):
        return _as_value(x).sum(axis=axis, keepdims=keepdims)
    out = x.val.sum(axis=axis, keepdims=keepdims)
    return x.tape._push(out, "sum", (x,), (axis, keepdims, x.val.shape))


def gather(x, idx):
    """Index into a node; used to pull single schedule entries out of a grid."""
    if not is_node(x):
        return _as_value(x)[idx]
    return x.tape._push(x.val[idx], "gather", (x,), (idx, x.val.shape))


def concat(parts: Sequence, axis=0):
    tape = tape_of(*parts)
    if tape is None:
        return np.concatenate([_as_value(p) for p in parts], axis=axis)
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    parents = tuple(p for p in parts if is_node(p))
    # Segment layout: (is_node, offset, length) per part, for the backward slice.
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    layout = [(is_node(p), offsets[i], sizes[i]) for i, p in enumerate(parts)]
    return tape._push(out, "concat", parents, (axis, layout))


def extern(x, out_value: Array, vjp: Callable[[Array, Array], Array], tag: str = "extern"):
    """A hand-coded primitive: value computed outside, local VJP supplied.

    vjp(x_value, out_grad) must return the gradient with respect to x.
    """
    if not is_node(x):
        return _as_value(out_value)
    return x.tape._push(out_value, "extern", (x,), (vjp, tag))


def mask_rows(x, keep: Array):
    """Zero the rows where keep is False; gradient is masked the same way.

    Unlike multiplying by a 0/1 mask this replaces non-finite entries, so a
    diverged trajectory cannot poison the backward pass with NaNs.
    """
    keepb = np.asarray(keep, dtype=bool)
    if not is_node(x):
        xv = _as_value(x)
        shaped = keepb.reshape(keepb.shape + (1,) * (xv.ndim - keepb.ndim))
        return np.where(shaped, xv, 0.0)
    shaped = keepb.reshape(keepb.shape + (1,) * (x.val.ndim - keepb.ndim))
    out = np.where(shaped, x.val, 0.0)
    return x.tape._push(out, "mask", (x,), shaped)


# Composite helpers (no new primitives).

def reciprocal(x):
    """1/x for strictly positive x, via exp(-log(x))."""
    return exp(mul(log(x), -1.0))


def mean_all(x, n: int):
    return mul(ssum(x), 1.0 / n)


def sqnorm_rows(x):
    return ssum(square(x), axis=1)


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def grad(loss: Node, wrt: Mapping[str, Node]) -> dict[str, Array]:
    """d(loss)/d(param) for every named leaf in wrt.

    Parameters absent from the graph get zero gradients. The loss must be a
    scalar node.
    """
    if not isinstance(loss, Node):
        raise TypeError("loss must be a Node")
    if loss.val.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.val.shape}")
    adj: list = [None] * (loss.idx + 1)
    adj[loss.idx] = np.ones(())
    records = loss.tape.records
    for i in range(loss.idx, -1, -1):
        g = adj[i]
        adj[i] = None
        if g is None:
            continue
        node = records[i]
        op = node.op
        if op in ("leaf", "const"):
            if op == "leaf":
                node.aux = g if node.aux is None else node.aux + g
            continue
        if op == "add":
            for p in node.parents:
                _acc(adj, p, _unbroadcast(g, p.val.shape))
        elif op == "mul":
            if len(node.parents) == 2:
                a, b = node.parents
                _acc(adj, a, _unbroadcast(g * b.val, a.val.shape))
                _acc(adj, b, _unbroadcast(g * a.val, b.val.shape))
            else:
                (a,) = node.parents
                _acc(adj, a, _unbroadcast(g * node.aux, a.val.shape))
        elif op == "matmul":
            if len(node.parents) == 2:
                a, b = node.parents
                _acc(adj, a, _mm_grad_left(g, b.val, a.val))
                _acc(adj, b, _mm_grad_right(g, a.val, b.val))
            else:
                (p,) = node.parents
                side, c = node.aux
                if side == "right_const":
                    _acc(adj, p, _mm_grad_left(g, c, p.val))
                else:
                    _acc(adj, p, _mm_grad_right(g, c, p.val))
        elif op == "softplus":
            (a,) = node.parents
            _acc(adj, a, g * expit(a.val))
        elif op == "exp":
            (a,) = node.parents
            _acc(adj, a, g * node.val)
        elif op == "log":
            (a,) = node.parents
            _acc(adj, a, g / a.val)
        elif op == "square":
            (a,) = node.parents
            _acc(adj, a, g * (2.0 * a.val))
        elif op == "sum":
            (a,) = node.parents
            axis, keepdims, in_shape = node.aux
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _acc(adj, a, np.broadcast_to(gg, in_shape))
        elif op == "gather":
            (a,) = node.parents
            idx, in_shape = node.aux
            full = np.zeros(in_shape)
            np.add.at(full, idx, g)
            _acc(adj, a, full)
        elif op == "concat":
            axis, layout = node.aux
            it = iter(node.parents)
            for is_n, off, size in layout:
                if not is_n:
                    continue
                p = next(it)
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(off, off + size)
                _acc(adj, p, g[tuple(sl)])
        elif op == "extern":
            (a,) = node.parents
            vjp, _tag = node.aux
            _acc(adj, a, vjp(a.val, g))
        elif op == "mask":
            (a,) = node.parents
            _acc(adj, a, np.where(node.aux, g, 0.0))
        else:  # pragma: no cover - construction guarantees known ops
            raise RuntimeError(f"unknown op {op}")
    out = {}
    for name, node in wrt.items():
        if node.op != "leaf":
            raise TypeError(f"wrt entry {name!r} is not a leaf node")
        g = node.aux
        node.aux = None
        out[name] = np.zeros_like(node.val) if g is None else g
    # clear any leftover leaf accumulations from leaves not in wrt
    for rec in records[: loss.idx + 1]:
        if rec.op == "leaf":
            rec.aux = None
    return out


def _acc(adj, parent: Node, g: Array):
    if adj[parent.idx] is None:
        adj[parent.idx] = g
    else:
        adj[parent.idx] = adj[parent.idx] + g


def _mm_grad_left(g, bv, a_val):
    if a_val.ndim == 1:  # (k,) @ (k, m) or (k,) @ (k,)
        return g * bv if bv.ndim == 1 else bv @ g
    if bv.ndim == 1:  # (n, k) @ (k,) -> out (n,)
        return np.outer(g, bv)
    return g @ bv.T


def _mm_grad_right(g, av, b_val):
    if b_val.ndim == 1:
        if av.ndim == 1:
            return g * av
        return av.T @ g
    if av.ndim == 1:
        return np.outer(av, g)
    return av.T @ g


# ---------------------------------------------------------------------------
# Finite-difference oracle.
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable, params: Mapping[str, Array], step: float = 1e-5) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``f`` must accept a ParamSet whose values are either raw arrays or Nodes
    (it is called once lifted for the analytic gradient and 2x per coordinate
    for the differences). Relative error per coordinate is
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    lifted = tape.lift(work)
    analytic = grad(f(lifted), lifted)
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(value(f(work)))
            flat[i] = orig - step
            fm = float(value(f(work)))
            flat[i] = orig
            central = (fp - fm) / (2.0 * step)
            err = abs(ga[i] - central) / (abs(ga[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Drift network.
# ---------------------------------------------------------------------------

class DriftNetwork:
    """Fully connected control network with softplus hidden activations.

    Input is the state concatenated with time features; output dimension
    equals the state dimension. Parameters live in a ParamSet under
    ``{name}.w{i}`` / ``{name}.b{i}``, so the same network object can be
    applied to raw arrays or to lifted Nodes.
    """

    def __init__(self, d: int, hidden: Sequence[int] = (20, 20), name: str = "net",
                 time_features: str = "fourier", extra_inputs: int = 0, horizon: float = 1.0):
        if time_features not in ("fourier", "raw"):
            raise ValueError(f"unknown time_features {time_features!r}")
        self.d = int(d)
        self.name = name
        self.time_features = time_features
        self.horizon = float(horizon)
        n_time = 3 if time_features == "fourier" else 1
        self.widths = [self.d + int(extra_inputs) + n_time, *map(int, hidden), self.d]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"{self.name}.w{i}", f"{self.name}.b{i}"]
        return names

    def init_params(self, rng: np.random.Generator, final_scale: float = 1e-2) -> ParamSet:
        """Uniform(+-1/sqrt(fan_in)) init; last layer scaled so the initial
        control is near zero and the initial sampler is plain annealed Langevin."""
        p: ParamSet = {}
        for i in range(self.n_layers):
            fan_in = self.widths[i]
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, self.widths[i + 1]))
            b = rng.uniform(-bound, bound, size=(self.widths[i + 1],))
            if i == self.n_layers - 1:
                w *= final_scale
                b *= final_scale
            p[f"{self.name}.w{i}"] = w
            p[f"{self.name}.b{i}"] = b
        return p

    def zero_params(self) -> ParamSet:
        p: ParamSet = {}
        for i in range(self.n_layers):
            p[f"{self.name}.w{i}"] = np.zeros((self.widths[i], self.widths[i + 1]))
            p[f"{self.name}.b{i}"] = np.zeros((self.widths[i + 1],))
        return p

    def time_feature_row(self, t: float) -> Array:
        u = t / self.horizon
        if self.time_features == "raw":
            return np.array([u])
        return np.array([u, math.sin(2.0 * math.pi * u), math.cos(2.0 * math.pi * u)])

    def apply(self, p: Mapping, h, t: float, extra=None):
        """Batched forward pass: h has shape (n, d)."""
        n = value(h).shape[0]
        row = self.time_feature_row(t)
        feats = np.broadcast_to(row, (n, row.size))
        parts = [h] if extra is None else [h, extra]
        x = concat([*parts, feats], axis=1)
        for i in range(self.n_layers):
            x = add(matmul(x, p[f"{self.name}.w{i}"]), p[f"{self.name}.b{i}"])
            if i < self.n_layers - 1:
                x = softplus(x)
        return x

    def forward(self, p: Mapping, t: float, x: Array) -> Array:
        """Single-point convenience wrapper: x of shape (d,) -> (d,)."""
        xv = value(x)
        if xv.shape != (self.d,):
            raise ValueError(
                f"state has shape {xv.shape}, network expects ({self.d},)")
        return value(self.apply(p, xv[None, :], t))[0]
