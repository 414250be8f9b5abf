"""Reverse-mode differentiation over a recorded tape of array primitives.

Expressions are evaluated eagerly while they are recorded, so sampling code can
branch on intermediate values (accept/reject draws, for instance) and feed the
outcome back in as constants.  Node values may carry a leading batch axis;
parameter leaves are unbatched and broadcast against it, and their adjoints are
summed over the batch.

The same building functions (``exp``, ``matvec``, ...) accept plain arrays, in
which case they simply return the numpy result and nothing is recorded.  Model
code is written once and runs either way.
"""

import builtins
from collections.abc import Mapping
from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "ParamTree",
    "Tape",
    "Var",
    "backward",
    "check_grad",
    "register_primitive",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "leaky_relu",
    "softplus",
    "log1mexp",
    "minimum",
    "matvec",
    "sum",
    "logsumexp",
    "take",
    "stitch",
    "apply",
    "value_of",
]

LEAKY_SLOPE = 0.01


class ParamTree(Mapping):
    """Named collection of float64 arrays of rank at most 2.

    Names are ``/``-separated paths, so a nested layout such as
    ``{"flow": {"block0": {"s": {"W1": ...}}}}`` is stored flat as
    ``"flow/block0/s/W1"``.  Iteration order is insertion order, which fixes
    the layout of :meth:`flatten`.
    """

    def __init__(self, entries=None):
        self._entries = {}
        if entries is not None:
            for name, value in entries.items():
                self[name] = value

    @classmethod
    def from_nested(cls, nested, prefix=""):
        tree = cls()
        for key, value in nested.items():
            name = f"{prefix}{key}"
            if isinstance(value, Mapping):
                for sub_name, sub_value in cls.from_nested(value, name + "/").items():
                    tree[sub_name] = sub_value
            else:
                tree[name] = value
        return tree

    def __getitem__(self, name):
        return self._entries[name]

    def __setitem__(self, name, value):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"parameter {name!r} has rank {arr.ndim} > 2")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"parameter {name!r} has non-finite entries")
        self._entries[name] = arr

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        shapes = ", ".join(f"{k}: {v.shape}" for k, v in self._entries.items())
        return f"ParamTree({shapes})"

    @property
    def total_dim(self):
        return int(builtins.sum(v.size for v in self._entries.values()))

    def shapes(self):
        return {k: v.shape for k, v in self._entries.items()}

    def flatten(self):
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise ShapeError(f"expected flat vector of length {self.total_dim}, got {flat.shape}")
        out = ParamTree()
        offset = 0
        for name, value in self._entries.items():
            out[name] = flat[offset : offset + value.size].reshape(value.shape)
            offset += value.size
        return out

    def copy(self):
        return ParamTree(self._entries)

    def zeros_like(self):
        return ParamTree({k: np.zeros_like(v) for k, v in self._entries.items()})

    def nested(self):
        root = {}
        for name, value in self._entries.items():
            node = root
            *parents, leaf = name.split("/")
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = value
        return root

    def subset(self, prefix):
        return ParamTree({k: v for k, v in self._entries.items() if k.startswith(prefix)})

    def allclose(self, other, **kwargs):
        if list(self) != list(other):
            return False
        return all(np.allclose(self[k], other[k], **kwargs) for k in self)


# ---------------------------------------------------------------------------
# primitives


class Primitive(NamedTuple):
    forward: Callable
    vjp: Callable


PRIMITIVES = {}


def register_primitive(name, forward, vjp):
    """Register ``forward(*args, **attrs)`` and ``vjp(g, out, *args, **attrs)``.

    ``vjp`` returns one cotangent per positional argument, already reduced to
    that argument's shape.
    """
    PRIMITIVES[name] = Primitive(forward, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _log1mexp(x):
    # log(1 - e^x) for x < 0
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _logsumexp(x):
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(x - m), axis=-1)) + m[..., 0]


def _take_vjp(g, out, x, idx):
    gx = np.zeros_like(x)
    gx[idx] = g
    return (gx,)


def _stitch_forward(*parts, idxs, n):
    ref = parts[0]
    out = np.empty((n,) + ref.shape[1:])
    for part, idx in zip(parts, idxs):
        out[idx] = part
    return out


def _matvec_vjp(g, out, x, W):
    m, n = W.shape
    rows = int(np.prod(g.shape[:-1]))
    gx = g @ W
    gW = g.reshape(rows, m).T @ x.reshape(rows, n)
    return gx, gW


register_primitive(
    "add",
    lambda x, y: x + y,
    lambda g, out, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y))),
)
register_primitive(
    "sub",
    lambda x, y: x - y,
    lambda g, out, x, y: (_unbroadcast(g, np.shape(x)), _unbroadcast(-g, np.shape(y))),
)
register_primitive(
    "mul",
    lambda x, y: x * y,
    lambda g, out, x, y: (_unbroadcast(g * y, np.shape(x)), _unbroadcast(g * x, np.shape(y))),
)
register_primitive("neg", lambda x: -x, lambda g, out, x: (-g,))
register_primitive("exp", np.exp, lambda g, out, x: (g * out,))
register_primitive("log", np.log, lambda g, out, x: (g / x,))
register_primitive("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),))
register_primitive(
    "leaky_relu",
    lambda x, slope=LEAKY_SLOPE: np.where(x > 0, x, slope * x),
    lambda g, out, x, slope=LEAKY_SLOPE: (g * np.where(x > 0, 1.0, slope),),
)
register_primitive(
    "softplus",
    lambda x: np.logaddexp(0.0, x),
    lambda g, out, x: (g * _sigmoid(x),),
)
register_primitive("log1mexp", _log1mexp, lambda g, out, x: (g * np.exp(x) / np.expm1(x),))
# derivative at the kink x == c is taken from the x < c side
register_primitive(
    "minimum",
    lambda x, c=0.0: np.minimum(x, c),
    lambda g, out, x, c=0.0: (g * (x <= c),),
)
register_primitive("matvec", lambda x, W: x @ W.T, _matvec_vjp)
register_primitive(
    "sum",
    lambda x: np.sum(x, axis=-1),
    lambda g, out, x: (np.broadcast_to(np.expand_dims(g, -1), x.shape),),
)
register_primitive(
    "logsumexp",
    _logsumexp,
    lambda g, out, x: (np.expand_dims(g, -1) * np.exp(x - np.expand_dims(out, -1)),),
)
register_primitive("take", lambda x, idx: x[idx], _take_vjp)
register_primitive(
    "stitch",
    _stitch_forward,
    lambda g, out, *parts, idxs, n: tuple(g[idx] for idx in idxs),
)
register_primitive(
    "apply",
    lambda x, fn, grad_fn: np.asarray(fn(x), dtype=np.float64),
    lambda g, out, x, fn, grad_fn: (np.expand_dims(g, -1) * grad_fn(x),),
)


# ---------------------------------------------------------------------------
# tape


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index} {self.tape.ops[self.index]}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a tape value is not a primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


class Tape:
    """Linear record of primitive applications.

    Nodes are appended in evaluation order, so every node's arguments precede
    it and the record is acyclic by construction.
    """

    def __init__(self):
        self.ops = []
        self.args = []
        self.attrs = []
        self.values = []
        self.requires = []
        self.param_nodes = {}
        self.output = None

    def __len__(self):
        return len(self.ops)

    def _push(self, op, args, attrs, value, requires):
        self.ops.append(op)
        self.args.append(args)
        self.attrs.append(attrs)
        self.values.append(value)
        self.requires.append(requires)
        return len(self.ops) - 1

    def param(self, name, value):
        if name in self.param_nodes:
            return Var(self, self.param_nodes[name])
        idx = self._push("param", (), {"name": name}, np.asarray(value, dtype=np.float64), True)
        self.param_nodes[name] = idx
        return Var(self, idx)

    def const(self, value):
        return Var(self, self._push("const", (), None, np.asarray(value, dtype=np.float64), False))

    def watch(self, params):
        """Register every entry of ``params`` as a leaf; returns name -> Var."""
        return {name: self.param(name, value) for name, value in params.items()}

    def record(self, name, args, attrs):
        ids = []
        vals = []
        requires = False
        for a in args:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ValueError("cannot mix values from different tapes")
                ids.append(a.index)
                vals.append(self.values[a.index])
                requires = requires or self.requires[a.index]
            else:
                arr = np.asarray(a, dtype=np.float64)
                ids.append(self._push("const", (), None, arr, False))
                vals.append(arr)
        value = PRIMITIVES[name].forward(*vals, **attrs)
        return Var(self, self._push(name, tuple(ids), attrs, value, requires))

    def set_output(self, var):
        if np.ndim(var.value) != 0:
            raise ShapeError(f"tape output must be a scalar, got shape {var.shape}")
        self.output = var.index
        return var

    def replay(self, overrides, upto=None):
        """Re-evaluate the record with some parameter leaves replaced.

        Returns the list of node values; discrete choices baked into node
        attributes (row indices) are kept as recorded.
        """
        upto = len(self.ops) - 1 if upto is None else upto
        vals = list(self.values[: upto + 1])
        for i in range(upto + 1):
            op = self.ops[i]
            if op == "param":
                name = self.attrs[i]["name"]
                if name in overrides:
                    vals[i] = np.asarray(overrides[name], dtype=np.float64)
            elif op != "const":
                vals[i] = PRIMITIVES[op].forward(*(vals[j] for j in self.args[i]), **self.attrs[i])
        return vals


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _op(name, *args, **attrs):
    tape = _tape_of(args)
    if tape is None:
        return PRIMITIVES[name].forward(*(np.asarray(a, dtype=np.float64) for a in args), **attrs)
    return tape.record(name, args, attrs)


def value_of(x):
    """Numeric value of a Var or array."""
    return x.value if isinstance(x, Var) else x


def add(x, y):
    return _op("add", x, y)


def sub(x, y):
    return _op("sub", x, y)


def mul(x, y):
    return _op("mul", x, y)


def neg(x):
    return _op("neg", x)


def exp(x):
    return _op("exp", x)


def log(x):
    return _op("log", x)


def tanh(x):
    return _op("tanh", x)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return _op("leaky_relu", x, slope=slope)


def softplus(x):
    return _op("softplus", x)


def log1mexp(x):
    """``log(1 - exp(x))`` for ``x < 0``."""
    return _op("log1mexp", x)


def minimum(x, c=0.0):
    """``min(x, c)`` for a constant ``c``."""
    return _op("minimum", x, c=float(c))


def matvec(x, W):
    """``x @ W.T``: applies the ``(m, n)`` matrix to the trailing axis of ``x``."""
    return _op("matvec", x, W)


def sum(x):  # noqa: A001 - mirrors numpy naming
    """Sum over the trailing axis."""
    return _op("sum", x)


def logsumexp(x):
    """Log-sum-exp over the trailing axis."""
    return _op("logsumexp", x)


def take(x, idx):
    """Rows ``x[idx]`` for an integer index array without repeats."""
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(x, Var):
        return x.tape.record("take", (x,), {"idx": idx})
    return np.asarray(x)[idx]


def stitch(parts, idxs, n):
    """Inverse of a partition: row ``idxs[i][j]`` of the result is ``parts[i][j]``.

    The index arrays must partition ``range(n)``.  Empty parts are dropped.
    """
    keep = [(p, np.asarray(i, dtype=np.intp)) for p, i in zip(parts, idxs) if len(i) > 0]
    parts = tuple(p for p, _ in keep)
    idxs = tuple(i for _, i in keep)
    tape = _tape_of(parts)
    if tape is None:
        return _stitch_forward(*(np.asarray(p, dtype=np.float64) for p in parts), idxs=idxs, n=n)
    return tape.record("stitch", parts, {"idxs": idxs, "n": n})


def apply(x, fn, grad_fn):
    """Scalar function of the trailing axis with a user-supplied gradient."""
    return _op("apply", x, fn=fn, grad_fn=grad_fn)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape, params, output=None):
    """Gradient of the tape output with respect to every entry of ``params``.

    Args:
        tape: a tape whose output (or ``output``) is a finite scalar node.
        params: tree naming the parameters; entries absent from the tape get a
            zero gradient.
        output: optional Var overriding ``tape.output``.

    Returns:
        ParamTree with the same names and shapes as ``params``.

    Raises:
        NumericalError: a value or adjoint feeding the output is non-finite.
    """
    out = tape.output if output is None else output.index
    if out is None:
        raise ValueError("tape has no output; call set_output first")
    if np.ndim(tape.values[out]) != 0:
        raise ShapeError("tape output must be a scalar")
    ops, args, attrs, values, requires = tape.ops, tape.args, tape.attrs, tape.values, tape.requires
    adj = [None] * (out + 1)
    adj[out] = np.ones(())
    for i in range(out, -1, -1):
        g = adj[i]
        if g is None or not requires[i]:
            continue
        op = ops[i]
        if op == "param":
            continue
        if not np.all(np.isfinite(values[i])):
            raise NumericalError(f"non-finite value at node {i} ({op})", node=i, op=op)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite adjoint at node {i} ({op})", node=i, op=op)
        arg_ids = args[i]
        grads = PRIMITIVES[op].vjp(g, values[i], *(values[j] for j in arg_ids), **attrs[i])
        for j, gj in zip(arg_ids, grads):
            if not requires[j]:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    result = ParamTree()
    for name, value in params.items():
        idx = tape.param_nodes.get(name)
        g = adj[idx] if idx is not None and idx <= out else None
        if g is None:
            result[name] = np.zeros_like(value)
        else:
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name!r}", node=idx, op="param")
            result[name] = np.broadcast_to(g, np.shape(value))
    return result


def check_grad(tape, params, h=1e-5, output=None, floor=1e-8):
    """Worst relative error between :func:`backward` and central differences.

    Each scalar coordinate of each parameter is perturbed by ``±h`` and the
    tape is replayed.  The relative error of a coordinate uses the
    denominator ``max(|analytic|, |numeric|, floor)``.  Central differences
    carry roughly ``eps |f| / h`` of rounding error, so near-zero gradients
    need a larger ``floor`` to be compared meaningfully.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    out = tape.output if output is None else output.index
    analytic = backward(tape, params, output=output)
    worst = 0.0
    for name, value in params.items():
        if name not in tape.param_nodes:
            continue
        base = np.array(value, dtype=np.float64)
        flat = base.ravel()
        for j in range(flat.size):
            plus = flat.copy()
            plus[j] += h
            minus = flat.copy()
            minus[j] -= h
            f_plus = tape.replay({name: plus.reshape(base.shape)}, upto=out)[out]
            f_minus = tape.replay({name: minus.reshape(base.shape)}, upto=out)[out]
            numeric = float(f_plus - f_minus) / (2.0 * h)
            exact = float(np.ravel(analytic[name])[j])
            denom = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
