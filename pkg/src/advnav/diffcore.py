"""Reverse-mode automatic differentiation over small dense arrays.

The engine is deliberately tiny.  A ``Tensor`` wraps a numpy array plus an
optional same-shape gradient buffer, and a ``Tape`` records every primitive
application in execution order.  Replaying a tape with the same inputs is
bit-exact, and walking it backwards accumulates gradients into every tensor
that contributed to a scalar loss.

The primitive set is closed: matrix multiply, elementwise add/multiply,
concatenate, row/full softmax (with an optional validity mask), tanh,
sigmoid, embedding lookup, scalar scale, sum-reduce and
cross-entropy-with-target.  Everything the models need (bilinear attention
scores, weighted sums, gated recurrences) is composed from these; see
``rowdot``/``attend``/``lstm_cell``.

Tensors are float32 by default and reductions accumulate in float64 before
casting back.  Gradient checks should build float64 tensors instead, so
central differences are not drowned in rounding noise.
"""

from __future__ import annotations

import numpy as np


class EngineError(Exception):
    """Malformed tape: shape mismatch, unknown primitive, non-scalar loss."""


class Tensor:
    """Dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name=None, dtype=np.float32):
        arr = np.asarray(values, dtype=dtype)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.values = arr
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, name=None):
        t = object.__new__(cls)
        t.values = arr
        t.grad = None
        t.name = name
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values.reshape(-1)[0])

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Execution-ordered record of primitive applications.

    A tape and the tensors it produced are confined to a single thread;
    distinct tapes may run concurrently against read-shared parameters.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# primitive catalog

def _softmax_array(x, axis, mask):
    """Stabilized softmax; masked entries are exactly zero."""
    out = np.empty_like(x)
    if axis is None:
        _softmax_flat(x.reshape(-1), None if mask is None else mask.reshape(-1),
                      out.reshape(-1))
    else:
        for r in range(x.shape[0]):
            _softmax_flat(x[r], None if mask is None else mask[r], out[r])
    return out


def _softmax_flat(row, mask, out):
    if mask is not None and not mask.any():
        raise EngineError("softmax: all entries masked")
    valid = row if mask is None else row[mask]
    shifted = row - valid.max()
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(dtype=np.float64)
    out[...] = (e / denom).astype(row.dtype)


def _softmax_backward(ctx, g, out, x):
    axis, mask = ctx
    if axis is None:
        dot = np.sum(g.astype(np.float64) * out, dtype=np.float64)
        return [(out * (g - dot)).astype(x.dtype)]
    dot = np.sum(g.astype(np.float64) * out, axis=1, keepdims=True)
    return [(out * (g - dot)).astype(x.dtype)]


_TINY = 1e-30


def _xent_forward(ctx, p, *rest):
    if ctx[0] == "index":
        v = -np.log(max(float(p.reshape(-1)[ctx[1]]), _TINY))
    else:
        q = rest[0]
        logs = np.log(np.maximum(p, _TINY))
        v = -np.sum(np.where(q != 0.0, q * logs, 0.0), dtype=np.float64)
    return np.array([[v]], dtype=p.dtype)


def _xent_backward(ctx, g, out, p, *rest):
    s = float(g.reshape(-1)[0])
    if ctx[0] == "index":
        gp = np.zeros_like(p)
        idx = ctx[1]
        gp.reshape(-1)[idx] = -s / max(float(p.reshape(-1)[idx]), _TINY)
        return [gp]
    q = rest[0]
    gp = -s * q / np.maximum(p, _TINY)
    gq = np.where(p > _TINY, -s * np.log(np.maximum(p, _TINY)), 0.0)
    return [gp.astype(p.dtype), gq.astype(q.dtype)]


def _concat_backward(ctx, g, out, *arrs):
    axis = ctx[0]
    grads, pos = [], 0
    for a in arrs:
        n = a.shape[axis]
        grads.append(g[pos:pos + n] if axis == 0 else g[:, pos:pos + n])
        pos += n
    return grads


def _embed_forward(ctx, table):
    return table[list(ctx[0])]


def _embed_backward(ctx, g, out, table):
    gt = np.zeros_like(table)
    np.add.at(gt, list(ctx[0]), g)
    return [gt]


def _sigmoid(ctx, x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


PRIMITIVES = {
    "matmul": (
        lambda ctx, a, b: a @ b,
        lambda ctx, g, out, a, b: [g @ b.T, a.T @ g],
    ),
    "add": (
        lambda ctx, a, b: a + b,
        lambda ctx, g, out, a, b: [g, g],
    ),
    "multiply": (
        lambda ctx, a, b: a * b,
        lambda ctx, g, out, a, b: [g * b, g * a],
    ),
    "concat": (
        lambda ctx, *arrs: np.concatenate(arrs, axis=ctx[0]),
        _concat_backward,
    ),
    "softmax": (
        lambda ctx, x: _softmax_array(x, ctx[0], ctx[1]),
        _softmax_backward,
    ),
    "tanh": (
        lambda ctx, x: np.tanh(x),
        lambda ctx, g, out, x: [g * (1.0 - out * out)],
    ),
    "sigmoid": (
        _sigmoid,
        lambda ctx, g, out, x: [g * out * (1.0 - out)],
    ),
    "embedding": (
        _embed_forward,
        _embed_backward,
    ),
    "scale": (
        lambda ctx, x: x * x.dtype.type(ctx[0]),
        lambda ctx, g, out, x: [g * x.dtype.type(ctx[0])],
    ),
    "sum_reduce": (
        lambda ctx, x: np.array([[np.sum(x, dtype=np.float64)]], dtype=x.dtype),
        lambda ctx, g, out, x: [np.full_like(x, g.reshape(-1)[0])],
    ),
    "cross_entropy": (
        _xent_forward,
        _xent_backward,
    ),
}


def _apply(tape, op, inputs, ctx=(None,)):
    fwd = PRIMITIVES[op][0]
    try:
        arr = fwd(ctx, *[t.values for t in inputs])
    except EngineError:
        raise
    except ValueError as exc:
        shapes = [t.values.shape for t in inputs]
        raise EngineError(f"{op}: incompatible shapes {shapes}: {exc}") from exc
    out = Tensor._wrap(arr)
    if tape is not None:
        tape.entries.append(TapeEntry(op, tuple(inputs), out, ctx))
    return out


def _check_same_shape(op, a, b):
    if a.values.shape != b.values.shape:
        raise EngineError(f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}")


# ---------------------------------------------------------------------------
# public ops

def matmul(tape, a, b):
    if a.values.shape[1] != b.values.shape[0]:
        raise EngineError(f"matmul: inner dims {a.values.shape} @ {b.values.shape}")
    return _apply(tape, "matmul", (a, b))


def add(tape, a, b):
    _check_same_shape("add", a, b)
    return _apply(tape, "add", (a, b))


def multiply(tape, a, b):
    _check_same_shape("multiply", a, b)
    return _apply(tape, "multiply", (a, b))


def concat(tape, tensors, axis=0):
    if axis not in (0, 1):
        raise EngineError(f"concat: axis {axis}")
    other = 1 - axis
    widths = {t.values.shape[other] for t in tensors}
    if len(widths) != 1:
        raise EngineError(f"concat: ragged shapes {[t.values.shape for t in tensors]}")
    return _apply(tape, "concat", tuple(tensors), (axis,))


def softmax(tape, x, axis=None, mask=None):
    """Full (axis=None) or per-row (axis=1) softmax; ``mask`` marks valid cells."""
    if axis not in (None, 1):
        raise EngineError(f"softmax: axis {axis}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(x.values.shape)
    return _apply(tape, "softmax", (x,), (axis, mask))


def tanh(tape, x):
    return _apply(tape, "tanh", (x,))


def sigmoid(tape, x):
    return _apply(tape, "sigmoid", (x,))


def embedding(tape, table, ids):
    ids = tuple(int(i) for i in ids)
    if ids and (min(ids) < 0 or max(ids) >= table.values.shape[0]):
        raise EngineError(f"embedding: id out of range for table {table.values.shape}")
    return _apply(tape, "embedding", (table,), (ids,))


def scale(tape, x, c):
    return _apply(tape, "scale", (x,), (float(c),))


def sum_reduce(tape, x):
    return _apply(tape, "sum_reduce", (x,))


def cross_entropy(tape, p, target):
    """-log p[target] for an integer target, or -sum(q*log p) for a tensor q.

    Passing the distribution itself as the target yields its entropy.
    """
    if isinstance(target, Tensor):
        _check_same_shape("cross_entropy", p, target)
        return _apply(tape, "cross_entropy", (p, target), ("tensor",))
    idx = int(target)
    if not 0 <= idx < p.values.size:
        raise EngineError(f"cross_entropy: target {idx} out of range {p.values.size}")
    return _apply(tape, "cross_entropy", (p,), ("index", idx))


# ---------------------------------------------------------------------------
# composed helpers (catalog-only compositions)

def constant(values, name=None, dtype=np.float32):
    return Tensor(values, name=name, dtype=dtype)


def zeros(shape, dtype=np.float32, name=None):
    return Tensor._wrap(np.zeros(shape, dtype=dtype), name=name)


def _ones(shape, dtype):
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def rowdot(tape, a, b):
    """Per-row dot products of ``a`` (n,d) against the row vector ``b`` (1,d).

    Returns an (n,1) column of scores: the ``X @ bᵀ`` pattern behind every
    bilinear attention score, built from tile / multiply / reduce matmuls.
    """
    n, d = a.values.shape
    if b.values.shape != (1, d):
        raise EngineError(f"rowdot: {a.values.shape} vs {b.values.shape}")
    tiled = matmul(tape, _ones((n, 1), a.dtype), b)
    prod = multiply(tape, a, tiled)
    return matmul(tape, prod, _ones((d, 1), a.dtype))


def attend(tape, weights, rows):
    """Weighted sum of ``rows`` (n,d) by the column ``weights`` (n,1) -> (1,d)."""
    n, d = rows.values.shape
    if weights.values.shape != (n, 1):
        raise EngineError(f"attend: {weights.values.shape} vs {rows.values.shape}")
    tiled = matmul(tape, weights, _ones((1, d), rows.dtype))
    prod = multiply(tape, tiled, rows)
    return matmul(tape, _ones((1, n), rows.dtype), prod)


def gather_rows(tape, x, indices):
    """Select rows of ``x`` by index via a constant one-hot selector."""
    n = x.values.shape[0]
    sel = np.zeros((len(indices), n), dtype=x.dtype)
    for r, i in enumerate(indices):
        if not 0 <= i < n:
            raise EngineError(f"gather_rows: index {i} out of range {n}")
        sel[r, i] = 1.0
    return matmul(tape, Tensor._wrap(sel), x)


def affine(tape, x, w, b):
    return add(tape, matmul(tape, x, w), b)


def lstm_cell(tape, x, h_prev, c_prev, params, prefix=""):
    """One step of a standard gated recurrence.

    ``params`` holds per-gate input/recurrent/bias tensors under keys
    ``{prefix}wx{i,f,g,o}``, ``{prefix}wh{i,f,g,o}``, ``{prefix}b{i,f,g,o}``.
    """
    def gate(tag, act):
        s = add(tape, add(tape, matmul(tape, x, params[prefix + "wx" + tag]),
                          matmul(tape, h_prev, params[prefix + "wh" + tag])),
                params[prefix + "b" + tag])
        return act(tape, s)

    i = gate("i", sigmoid)
    f = gate("f", sigmoid)
    g = gate("g", tanh)
    o = gate("o", sigmoid)
    c = add(tape, multiply(tape, f, c_prev), multiply(tape, i, g))
    h = multiply(tape, o, tanh(tape, c))
    return h, c


def init_uniform(rng, shape, fan_in=None, name=None, dtype=np.float32):
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in defaults to rows."""
    fan = fan_in if fan_in is not None else shape[0]
    bound = 1.0 / np.sqrt(fan)
    return Tensor(rng.uniform(-bound, bound, size=shape), name=name, dtype=dtype)


def init_lstm_params(rng, input_dim, hidden_dim, prefix="", dtype=np.float32):
    params = {}
    for tag in "ifgo":
        params[prefix + "wx" + tag] = init_uniform(rng, (input_dim, hidden_dim), dtype=dtype)
        params[prefix + "wh" + tag] = init_uniform(rng, (hidden_dim, hidden_dim), dtype=dtype)
        params[prefix + "b" + tag] = init_uniform(rng, (1, hidden_dim), fan_in=input_dim, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# tape execution

def evaluate(tape, inputs=None):
    """Rebind named leaf tensors, then recompute every entry in tape order.

    Replaying without new inputs reproduces all recorded outputs bit-for-bit.
    Returns the named tensors produced by tape entries.
    """
    produced = {id(e.output) for e in tape.entries}
    leaves = {}
    for e in tape.entries:
        for t in e.inputs:
            if t.name is not None and id(t) not in produced:
                leaves[t.name] = t
    for name, arr in (inputs or {}).items():
        if name not in leaves:
            raise EngineError(f"evaluate: no leaf input named {name!r}")
        leaf = leaves[name]
        arr = np.asarray(arr, dtype=leaf.dtype)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.shape != leaf.values.shape:
            raise EngineError(f"evaluate: input {name!r} shape {arr.shape} "
                              f"!= {leaf.values.shape}")
        leaf.values = arr
    outputs = {}
    for i, e in enumerate(tape.entries):
        if e.op not in PRIMITIVES:
            raise EngineError(f"evaluate: unknown primitive {e.op!r} at entry {i}")
        try:
            e.output.values = PRIMITIVES[e.op][0](e.ctx, *[t.values for t in e.inputs])
        except EngineError as exc:
            raise EngineError(f"entry {i} ({e.op}): {exc}") from exc
        if e.output.name is not None:
            outputs[e.output.name] = e.output
    return outputs


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` for every contributing leaf.

    Leaf gradients add across fan-out and across calls; reset with
    ``zero_grads``.  Intermediate tensors get their grads overwritten per
    call.  Leaves that do not contribute to the loss end with zero grads.
    """
    if loss.values.size != 1:
        raise EngineError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    if not any(e.output is loss for e in tape.entries):
        raise EngineError("backward: loss is not produced by this tape")
    produced = {id(e.output) for e in tape.entries}
    flow = {id(loss): np.ones_like(loss.values)}
    for e in reversed(tape.entries):
        g = flow.get(id(e.output))
        if g is None:
            continue
        e.output.grad = g
        grads = PRIMITIVES[e.op][1](e.ctx, g, e.output.values,
                                    *[t.values for t in e.inputs])
        for t, gi in zip(e.inputs, grads):
            if gi is None:
                continue
            gi = gi.astype(t.values.dtype, copy=False)
            if id(t) in produced:
                prev = flow.get(id(t))
                flow[id(t)] = gi if prev is None else prev + gi
            else:
                t.accumulate_grad(gi)
    for e in tape.entries:
        for t in e.inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)


def zero_grads(params):
    for t in (params.values() if isinstance(params, dict) else params):
        t.grad = None


# ---------------------------------------------------------------------------
# verification helpers

def numeric_gradient(f, tensors, h=1e-3):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each tensor.

    ``f`` must recompute from the tensors' current values on every call.
    Use float64 tensors: float32 forward noise overwhelms the quotient.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.values)
        flat, gflat = t.values.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
