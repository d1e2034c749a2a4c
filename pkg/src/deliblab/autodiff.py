"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Tensors are always 2-D (scalars are (1,1), vectors are rows). Operations
record nodes on the innermost active ``Tape``; the node list is topologically
ordered by construction, so one reverse sweep computes exact gradients.

Finiteness policy: leaf tensors are validated on creation, and ``exp`` /
``log`` (the only primitives that can leave the finite domain on in-range
inputs) validate their results. Every other primitive maps finite inputs to
finite outputs at desk scale, so non-finite values cannot enter a graph
unnoticed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericDomainError, VerificationInvalidError

_TAPES: list["Tape"] = []


class Tensor:
    """A 2-D float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, _tape=None, _node_id=None, _checked=False):
        if _tape is None:
            data = np.asarray(data, dtype=np.float64)
            if data.ndim == 1:
                data = data.reshape(1, -1)
            if data.ndim != 2:
                raise ContractError(f"tensors are 2-D, got shape {data.shape}")
            if not _checked and not np.isfinite(data).all():
                raise NumericDomainError("non-finite value in tensor literal")
        self.data = data
        self.tape = _tape
        self.node_id = _node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a (1,1) tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    __slots__ = ("op", "parents", "value", "ctx")

    def __init__(self, op, parents, value, ctx):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx


class Tape:
    """Append-only record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def _leaf(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), t.data, None))
        t.tape = self
        t.node_id = nid
        return nid


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op, inputs, out, ctx=None) -> Tensor:
    tape = _active()
    if tape is None:
        return Tensor(out, _tape=None, _node_id=None, _checked=True)
    parents = tuple(tape._leaf(t) for t in inputs)
    nid = len(tape.nodes)
    tape.nodes.append(Node(op, parents, out, ctx))
    return Tensor(out, _tape=tape, _node_id=nid, _checked=True)


def const(data) -> Tensor:
    """Wrap an array as a non-parameter leaf."""
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _want(t, what="operand"):
    if not isinstance(t, Tensor):
        raise ContractError(f"{what} must be a Tensor, got {type(t).__name__}")
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    _want(a), _want(b)
    if a.data.shape != b.data.shape and not (
        b.data.shape == (1, a.data.shape[1])
    ):
        raise ContractError(f"add shapes {a.data.shape} vs {b.data.shape}")
    return _emit("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _want(a), _want(b)
    if a.data.shape != b.data.shape and not (
        b.data.shape == (1, a.data.shape[1])
    ):
        raise ContractError(f"sub shapes {a.data.shape} vs {b.data.shape}")
    return _emit("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; the right operand may be a broadcast row."""
    _want(a), _want(b)
    if a.data.shape != b.data.shape and not (
        b.data.shape == (1, a.data.shape[1])
    ):
        raise ContractError(f"mul shapes {a.data.shape} vs {b.data.shape}")
    return _emit("mul", (a, b), a.data * b.data)


def scale(a: Tensor, k: float) -> Tensor:
    _want(a)
    k = float(k)
    if not np.isfinite(k):
        raise NumericDomainError("scale factor is not finite")
    return _emit("scale", (a,), a.data * k, k)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _want(a), _want(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul shapes {a.data.shape} vs {b.data.shape}")
    return _emit("matmul", (a, b), a.data @ b.data)


def tanh(a: Tensor) -> Tensor:
    _want(a)
    return _emit("tanh", (a,), np.tanh(a.data))


def sigmoid(a: Tensor) -> Tensor:
    _want(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), out)


def exp(a: Tensor) -> Tensor:
    _want(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NumericDomainError("exp overflow or non-finite input")
    return _emit("exp", (a,), out)


def log(a: Tensor) -> Tensor:
    _want(a)
    if not (np.isfinite(a.data).all() and (a.data > 0).all()):
        raise NumericDomainError("log input must be finite and positive")
    return _emit("log", (a,), np.log(a.data))


def transpose(a: Tensor) -> Tensor:
    _want(a)
    return _emit("transpose", (a,), a.data.T.copy())


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    w = parts[0].data.shape[1]
    for p in parts:
        _want(p)
        if p.data.shape[1] != w:
            raise ContractError(
                f"concat_rows widths {parts[0].data.shape} vs {p.data.shape}"
            )
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
    return _emit(
        "concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0),
        offsets,
    )


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    h = parts[0].data.shape[0]
    for p in parts:
        _want(p)
        if p.data.shape[0] != h:
            raise ContractError(
                f"concat_cols heights {parts[0].data.shape} vs {p.data.shape}"
            )
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
    return _emit(
        "concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=1),
        offsets,
    )


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    _want(a)
    if not (0 <= j0 < j1 <= a.data.shape[1]):
        raise ContractError(f"slice_cols [{j0}:{j1}] of shape {a.data.shape}")
    return _emit("slice_cols", (a,), a.data[:, j0:j1].copy(), (j0, j1))


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    _want(a)
    if not (0 <= i0 < i1 <= a.data.shape[0]):
        raise ContractError(f"slice_rows [{i0}:{i1}] of shape {a.data.shape}")
    return _emit("slice_rows", (a,), a.data[i0:i1, :].copy(), (i0, i1))


def embed(table: Tensor, ids) -> Tensor:
    """Differentiable row lookup; gradients add up over repeated ids."""
    _want(table, "embedding table")
    ids = tuple(int(i) for i in ids)
    V = table.data.shape[0]
    for i in ids:
        if not 0 <= i < V:
            raise ContractError(f"embedding id {i} outside table of {V} rows")
    return _emit("embed", (table,), table.data[list(ids), :].copy(), ids)


def reduce_sum(a: Tensor) -> Tensor:
    _want(a)
    return _emit("reduce_sum", (a,), np.array([[a.data.sum()]]))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    _want(a)
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax", (a,), out)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax computed directly (never log(softmax(x)))."""
    _want(a)
    x = a.data
    m = x.max(axis=1, keepdims=True)
    s = x - m
    out = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    return _emit("log_softmax", (a,), out)


def pick(a: Tensor, i: int, j: int) -> Tensor:
    """Select one entry as a (1,1) tensor."""
    _want(a)
    n, m = a.data.shape
    if not (0 <= i < n and 0 <= j < m):
        raise ContractError(f"pick ({i},{j}) of shape {a.data.shape}")
    return _emit("pick", (a,), np.array([[a.data[i, j]]]), (i, j))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the constant ``hard`` array; route gradients to ``soft``."""
    _want(soft, "soft branch")
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise ContractError(f"straight_through shapes {hard.shape} vs {soft.data.shape}")
    return _emit("straight_through", (soft,), hard.copy())


# kind -> callable, for the generic entry point
PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
    "transpose": transpose, "concat_rows": concat_rows, "concat_cols": concat_cols,
    "slice_cols": slice_cols, "slice_rows": slice_rows, "embed": embed,
    "reduce_sum": reduce_sum, "softmax": softmax, "log_softmax": log_softmax,
    "pick": pick, "straight_through": straight_through,
}


def apply_primitive(kind: str, *args, **kwargs) -> Tensor:
    """Apply a primitive by name; the preferred API is the named functions."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _bw_add(node, g, vals):
    gb = g if vals[1].shape == g.shape else g.sum(axis=0, keepdims=True)
    return g, gb


def _bw_sub(node, g, vals):
    gb = -g if vals[1].shape == g.shape else -g.sum(axis=0, keepdims=True)
    return g, gb


def _bw_mul(node, g, vals):
    a, b = vals
    ga = g * b
    gb = g * a
    if b.shape != g.shape:
        gb = gb.sum(axis=0, keepdims=True)
    return ga, gb


def _bw_matmul(node, g, vals):
    a, b = vals
    return g @ b.T, a.T @ g


def _bw_softmax(node, g, vals):
    y = node.value
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _bw_log_softmax(node, g, vals):
    return (g - np.exp(node.value) * g.sum(axis=1, keepdims=True),)


def _bw_concat_rows(node, g, vals):
    off = node.ctx
    return tuple(g[off[i]:off[i + 1], :] for i in range(len(node.parents)))


def _bw_concat_cols(node, g, vals):
    off = node.ctx
    return tuple(g[:, off[i]:off[i + 1]] for i in range(len(node.parents)))


def _bw_slice_cols(node, g, vals):
    j0, j1 = node.ctx
    out = np.zeros_like(vals[0])
    out[:, j0:j1] = g
    return (out,)


def _bw_slice_rows(node, g, vals):
    i0, i1 = node.ctx
    out = np.zeros_like(vals[0])
    out[i0:i1, :] = g
    return (out,)


def _bw_embed(node, g, vals):
    out = np.zeros_like(vals[0])
    np.add.at(out, list(node.ctx), g)
    return (out,)


def _bw_pick(node, g, vals):
    out = np.zeros_like(vals[0])
    out[node.ctx] = g[0, 0]
    return (out,)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": lambda node, g, vals: (g * node.ctx,),
    "matmul": _bw_matmul,
    "tanh": lambda node, g, vals: (g * (1.0 - node.value * node.value),),
    "sigmoid": lambda node, g, vals: (g * node.value * (1.0 - node.value),),
    "exp": lambda node, g, vals: (g * node.value,),
    "log": lambda node, g, vals: (g / vals[0],),
    "transpose": lambda node, g, vals: (g.T,),
    "concat_rows": _bw_concat_rows,
    "concat_cols": _bw_concat_cols,
    "slice_cols": _bw_slice_cols,
    "slice_rows": _bw_slice_rows,
    "embed": _bw_embed,
    "reduce_sum": lambda node, g, vals: (np.full_like(vals[0], g[0, 0]),),
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "pick": _bw_pick,
    "straight_through": lambda node, g, vals: (g,),
}


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to named parameter tensors.

    Parameters that never touched the loss's tape get zero gradients of the
    matching shape. The returned arrays are freshly allocated.
    """
    if loss.data.shape != (1, 1):
        raise ContractError(f"loss must be (1,1), got {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was computed without an active tape")
    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[loss.node_id] = np.ones((1, 1))
    for nid in range(loss.node_id, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        node = nodes[nid]
        if node.op == "leaf":
            continue
        vals = tuple(nodes[p].value for p in node.parents)
        pgrads = _BACKWARD[node.op](node, g, vals)
        for pid, pg in zip(node.parents, pgrads):
            if adj[pid] is None:
                adj[pid] = pg.copy()
            else:
                adj[pid] += pg
    out = {}
    for name, p in params.items():
        if p.tape is tape and adj[p.node_id] is not None:
            out[name] = adj[p.node_id].copy()
        else:
            out[name] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class FiniteDiffReport:
    """Per-parameter worst relative error of backward() vs central differences."""

    def __init__(self, per_param, tol):
        self.per_param = per_param
        self.tol = tol
        self.worst = max(per_param.values()) if per_param else 0.0
        self.passed = self.worst < tol

    def __repr__(self):
        return f"FiniteDiffReport(worst={self.worst:.3e}, passed={self.passed})"


def finite_diff_check(f, params: dict[str, Tensor], step: float = 1e-5,
                      tol: float = 1e-6) -> FiniteDiffReport:
    """Compare backward() gradients of f(params) against central differences.

    f must be deterministic: it is evaluated twice up front and must return
    bit-identical values, otherwise the check is meaningless and raises.
    Relative error uses denominator max(1, |analytic|, |numeric|).
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")

    def value():
        return f(params).item()

    v0 = value()
    if value() != v0:
        raise VerificationInvalidError("objective is not deterministic under fixed inputs")

    with Tape():
        loss = f(params)
        analytic = backward(loss, params)

    per_param = {}
    for name, p in params.items():
        a = analytic[name]
        err = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            dn = value()
            flat[i] = orig
            fd = (up - dn) / (2.0 * step)
            an = a.reshape(-1)[i]
            err = max(err, abs(fd - an) / max(1.0, abs(fd), abs(an)))
        per_param[name] = err
    return FiniteDiffReport(per_param, tol)
