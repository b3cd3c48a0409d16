"""Tape-based reverse-mode differentiation over rank-0/1/2 numpy arrays.

A :class:`Graph` records every operation eagerly. Each node keeps its
output value plus whatever the backward rule needs. ``backward`` walks the
tape in reverse id order, so every node's gradient is complete before it is
propagated further (inputs always have smaller ids than their consumers).

Values are stored in the engine dtype (float32 unless ``PBADV_FLOAT64=1``
is set, or :func:`precision` is used); reductions accumulate in float64.
"""

import contextlib
import os

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

_dtype = np.float64 if os.environ.get("PBADV_FLOAT64", "") == "1" else np.float32

NORM_FLOOR = 1e-12
KL_CLAMP = 1e-12


def get_dtype():
    return _dtype


def set_dtype(dtype):
    global _dtype
    _dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype (used by 64-bit gradient checks)."""
    old = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def as_array(value):
    return np.asarray(value, dtype=_dtype)


class Node:
    """Handle to one recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "id", "value", "requires_grad", "kind")

    def __init__(self, graph, node_id, value, requires_grad, kind):
        self.graph = graph
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self.kind = kind

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("kind", "inputs", "backward", "saved")

    def __init__(self, kind, inputs, backward, saved):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.saved = saved


class Graph:
    """Append-only tape. One graph per forward/backward pass."""

    def __init__(self):
        self.entries = []
        self.nodes = []
        self.grads = {}
        self.freed = False
        # activation pattern of every kink (relu) op, for gradient checks
        self.kinks = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=False, kind="leaf"):
        value = as_array(value)
        _check_finite(kind, value)
        node = Node(self, len(self.nodes), value, requires_grad, kind)
        self.nodes.append(node)
        self.entries.append(_Entry(kind, (), None, None))
        return node

    def constant(self, value):
        return self.leaf(value, requires_grad=False, kind="const")

    def record(self, kind, inputs, forward, backward):
        """Run ``forward`` on the input values and append the result.

        ``forward(*values)`` returns ``(output, saved)``;
        ``backward(grad_out, saved)`` returns one gradient (or None) per input.
        """
        if self.freed:
            raise ContractError("graph already consumed by backward()")
        for node in inputs:
            if node.graph is not self or node.id >= len(self.nodes):
                raise ContractError(f"{kind}: input node not in this graph")
        with np.errstate(over="ignore", invalid="ignore"):
            out, saved = forward(*(n.value for n in inputs))
            # scalars (loss values) keep their float64 accumulation
            out = np.asarray(out, dtype=np.float64 if np.ndim(out) == 0 else _dtype)
        _check_finite(kind, out)
        requires_grad = any(n.requires_grad for n in inputs)
        node = Node(self, len(self.nodes), out, requires_grad, kind)
        self.nodes.append(node)
        self.entries.append(
            _Entry(kind, tuple(n.id for n in inputs), backward if requires_grad else None, saved)
        )
        return node

    def backward(self, root):
        if self.freed:
            raise ContractError("backward() already ran on this graph")
        if root.graph is not self:
            raise ContractError("root does not belong to this graph")
        if root.value.shape != ():
            raise ContractError(f"backward root must be a scalar, got shape {root.value.shape}")
        grads = {root.id: np.ones((), dtype=np.float64)}
        for nid in range(root.id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            entry = self.entries[nid]
            if entry.backward is None:
                continue
            in_grads = entry.backward(g, entry.saved)
            for iid, ig in zip(entry.inputs, in_grads):
                if ig is None or not self.nodes[iid].requires_grad:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig
        out = {}
        for nid, g in grads.items():
            node = self.nodes[nid]
            if not node.requires_grad:
                continue
            g = np.asarray(g, dtype=node.value.dtype).reshape(node.value.shape)
            _check_finite(f"grad[{node.kind}]", g)
            out[nid] = g
        self.grads = out
        for entry in self.entries:
            entry.saved = None
        self.kinks = []
        self.freed = True
        return out

    def grad(self, node):
        """Gradient of the last backward root w.r.t. ``node`` (zeros if unreachable)."""
        g = self.grads.get(node.id)
        if g is None:
            return np.zeros_like(node.value)
        return g


def backward(graph, root):
    return graph.backward(root)


def _check_finite(kind, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kind}: non-finite value encountered")


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, f"shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    g = a.graph
    if a.shape == b.shape:
        return g.record("add", (a, b), lambda x, y: (x + y, None), lambda gr, s: (gr, gr))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return g.record(
            "add",
            (a, b),
            lambda x, y: (x + y, None),
            lambda gr, s: (gr, np.sum(gr, axis=0, dtype=np.float64)),
        )
    raise ShapeError("add", f"cannot add shapes {a.shape} and {b.shape}")


def sub(a, b):
    _same_shape("sub", a.value, b.value)
    return a.graph.record("sub", (a, b), lambda x, y: (x - y, None), lambda gr, s: (gr, -gr))


def mul(a, b):
    _same_shape("mul", a.value, b.value)
    return a.graph.record(
        "mul", (a, b), lambda x, y: (x * y, (x, y)), lambda gr, s: (gr * s[1], gr * s[0])
    )


def scale(a, c):
    c = float(c)
    return a.graph.record("scale", (a,), lambda x: (x * c, None), lambda gr, s: (gr * c,))


def relu(a):
    def fwd(x):
        mask = x > 0
        a.graph.kinks.append(mask)
        return x * mask, mask

    return a.graph.record("relu", (a,), fwd, lambda gr, mask: (gr * mask,))


def dropout(a, rate, rng=None, train=False):
    """Inverted dropout; identity when ``train`` is False or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(_dtype) / keep
    return a.graph.record("dropout", (a,), lambda x: (x * mask, None), lambda gr, s: (gr * mask,))


# ---------------------------------------------------------------------------
# structural


def matmul(a, b):
    x, y = a.value, b.value
    if x.ndim not in (1, 2) or y.ndim not in (1, 2) or x.shape[-1] != y.shape[0]:
        raise ShapeError("matmul", f"incompatible shapes {x.shape} @ {y.shape}")

    def fwd(x, y):
        x64 = x.astype(np.float64)
        y64 = y.astype(np.float64)
        return x64 @ y64, (x64, y64)

    def bwd(gr, s):
        x64, y64 = s
        gr = np.asarray(gr, dtype=np.float64)
        if x64.ndim == 2 and y64.ndim == 2:
            return gr @ y64.T, x64.T @ gr
        if x64.ndim == 1 and y64.ndim == 2:
            return y64 @ gr, np.outer(x64, gr)
        if x64.ndim == 2 and y64.ndim == 1:
            return np.outer(gr, y64), x64.T @ gr
        return gr * y64, gr * x64

    return a.graph.record("matmul", (a, b), fwd, bwd)


def concat(nodes, axis=-1):
    nodes = tuple(nodes)
    ndim = nodes[0].value.ndim
    ax = axis % ndim
    for n in nodes[1:]:
        other = [d for i, d in enumerate(n.shape) if i != ax]
        first = [d for i, d in enumerate(nodes[0].shape) if i != ax]
        if n.value.ndim != ndim or other != first:
            raise ShapeError("concat", f"cannot concatenate {[m.shape for m in nodes]}")
    sizes = [n.shape[ax] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(gr, s):
        return tuple(np.split(gr, splits, axis=ax))

    return nodes[0].graph.record(
        "concat", nodes, lambda *xs: (np.concatenate(xs, axis=ax), None), bwd
    )


def gather_rows(table, index):
    """Select rows of a rank-2 table; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("gather_rows", f"table must be rank-2, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError("gather_rows", f"row index out of range for {table.shape[0]} rows")
    n_rows = table.shape[0]

    def bwd(gr, s):
        out = np.zeros((n_rows, gr.shape[-1]), dtype=np.float64)
        np.add.at(out, index, gr)
        return (out,)

    return table.graph.record("gather_rows", (table,), lambda t: (t[index], None), bwd)


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return a.graph.record(
        "sum",
        (a,),
        lambda x: (np.sum(x, dtype=np.float64), None),
        lambda gr, s: (np.full(shape, gr, dtype=np.float64),),
    )


def mean(a):
    shape = a.shape
    size = max(a.value.size, 1)
    return a.graph.record(
        "mean",
        (a,),
        lambda x: (np.mean(x, dtype=np.float64), None),
        lambda gr, s: (np.full(shape, gr / size, dtype=np.float64),),
    )


# ---------------------------------------------------------------------------
# normalisation and similarity


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1] if x.value.ndim else 0
    if x.value.ndim == 0 or d == 0:
        raise ContractError("layer_norm needs at least one feature")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")

    def fwd(x, gm, bt):
        x64 = x.astype(np.float64)
        mu = x64.mean(axis=-1, keepdims=True)
        xc = x64 - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gm + bt, (xhat, inv, gm.astype(np.float64))

    def bwd(gr, s):
        xhat, inv, gm = s
        gr = np.asarray(gr, dtype=np.float64)
        red = tuple(range(gr.ndim - 1))
        g_gamma = np.sum(gr * xhat, axis=red)
        g_beta = np.sum(gr, axis=red)
        gx_hat = gr * gm
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return x.graph.record("layer_norm", (x, gamma, beta), fwd, bwd)


def _normalize_rows(kind, x64):
    norms = np.sqrt(np.sum(x64 * x64, axis=-1, keepdims=True))
    bad = np.flatnonzero(norms.reshape(-1) <= NORM_FLOOR)
    if bad.size:
        raise DegenerateInputError(f"{kind}: zero-norm vector at row(s) {bad[:10].tolist()}")
    return x64 / norms, norms


def _unnormalize_grad(g_hat, xhat, norms):
    return (g_hat - xhat * np.sum(g_hat * xhat, axis=-1, keepdims=True)) / norms


def cosine(u, v):
    """Cosine similarity of two rank-1 vectors (scalar output)."""
    if u.value.ndim != 1:
        raise ShapeError("cosine", f"expected rank-1 inputs, got {u.shape}")
    _same_shape("cosine", u.value, v.value)

    def fwd(a, b):
        ah, an = _normalize_rows("cosine", a.astype(np.float64))
        bh, bn = _normalize_rows("cosine", b.astype(np.float64))
        return np.clip(np.dot(ah, bh), -1.0, 1.0), (ah, an, bh, bn)

    def bwd(gr, s):
        ah, an, bh, bn = s
        return _unnormalize_grad(gr * bh, ah, an), _unnormalize_grad(gr * ah, bh, bn)

    return u.graph.record("cosine", (u, v), fwd, bwd)


def cosine_matrix(a, b):
    """All-pairs cosine between rows of ``a`` (N, E) and rows of ``b`` (K, E) -> (N, K)."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", f"incompatible shapes {a.shape} and {b.shape}")

    def fwd(x, y):
        xh, xn = _normalize_rows("cosine_matrix", x.astype(np.float64))
        yh, yn = _normalize_rows("cosine_matrix", y.astype(np.float64))
        return np.clip(xh @ yh.T, -1.0, 1.0), (xh, xn, yh, yn)

    def bwd(gr, s):
        xh, xn, yh, yn = s
        gr = np.asarray(gr, dtype=np.float64)
        return _unnormalize_grad(gr @ yh, xh, xn), _unnormalize_grad(gr.T @ xh, yh, yn)

    return a.graph.record("cosine_matrix", (a, b), fwd, bwd)


# ---------------------------------------------------------------------------
# probabilities and losses


def _log_softmax64(x):
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(a):
    def fwd(x):
        p = np.exp(_log_softmax64(x))
        return p, p

    def bwd(gr, p):
        gr = np.asarray(gr, dtype=np.float64)
        return (p * (gr - np.sum(gr * p, axis=-1, keepdims=True)),)

    return a.graph.record("softmax", (a,), fwd, bwd)


def softmax_cross_entropy(logits, target):
    """Mean of -log softmax(logits)[target] over rows.

    ``logits`` is (K,) with an int target, or (B, K) with B int targets.
    """
    x = logits.value
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ShapeError("softmax_cross_entropy", f"bad logits shape {x.shape}")
    k = x.shape[-1]
    t = np.asarray(target, dtype=np.int64)
    if x.ndim == 1 and t.ndim != 0:
        raise ContractError("rank-1 logits take a single integer target")
    if x.ndim == 2 and t.shape != (x.shape[0],):
        raise ContractError(f"expected {x.shape[0]} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"target out of range for {k} classes")
    rows = t.reshape(-1)
    n = rows.size

    def fwd(z):
        logp = _log_softmax64(z).reshape(n, k)
        return -np.mean(logp[np.arange(n), rows]), logp

    def bwd(gr, logp):
        g = np.exp(logp)
        g[np.arange(n), rows] -= 1.0
        return ((gr / n) * g.reshape(x.shape),)

    return logits.graph.record("softmax_cross_entropy", (logits,), fwd, bwd)


def kl_divergence(p, q, atol=1e-6):
    """Row-mean of sum p * log(p / q); ``p`` is a fixed target (no gradient)."""
    p_arr = p.value if isinstance(p, Node) else np.asarray(p)
    p64 = np.asarray(p_arr, dtype=np.float64)
    if p64.shape != q.shape:
        raise ShapeError("kl_divergence", f"shape mismatch {p64.shape} vs {q.shape}")
    for name, arr in (("p", p64), ("q", np.asarray(q.value, dtype=np.float64))):
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > atol):
            raise ContractError(f"kl_divergence: {name} is not a probability vector")
    n = 1 if p64.ndim == 1 else p64.shape[0]
    pos = p64 > 0
    log_p = np.where(pos, np.log(np.where(pos, p64, 1.0)), 0.0)

    def fwd(qv):
        q64 = qv.astype(np.float64)
        qc = np.maximum(q64, KL_CLAMP)
        terms = np.where(pos, p64 * (log_p - np.log(qc)), 0.0)
        return np.sum(terms) / n, q64

    def bwd(gr, q64):
        live = q64 > KL_CLAMP
        g = np.where(pos & live, -p64 / np.where(live, q64, 1.0), 0.0)
        return (gr * g / n,)

    return q.graph.record("kl_divergence", (q,), fwd, bwd)


def offset_to(x, value):
    """Node holding ``value`` whose gradient flows to ``x`` unchanged.

    Equivalent to ``x + (value - x)`` with the offset held constant, but the
    stored value is exactly ``value`` (no re-rounding of ``x + offset``).
    """
    value = as_array(value)
    _same_shape("offset_to", x.value, value)
    return x.graph.record("offset_to", (x,), lambda v: (value, None), lambda gr, s: (gr,))
