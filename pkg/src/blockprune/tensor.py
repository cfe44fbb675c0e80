"""Dense tensors with define-by-run reverse-mode autodiff.

Every differentiable op records a :class:`Node` holding its inputs and a
backward rule. Node ids grow monotonically, so sorting the nodes reachable
from a loss by id gives a valid topological order; :func:`backward` walks
that order in reverse and visits each node exactly once.

Shapes must match exactly. The only broadcast allowed is a 1-D row vector
added along the last axis of a tensor.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, ShapeError, TokenIdError

_state = threading.local()
_node_ids = itertools.count()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "__weakref__")

    def __init__(self, op, inputs, backward_fn):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tape_id(self):
        return None if self.node is None else self.node.id

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; all of these go through the checked ops below
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out, backward_fn):
    t = Tensor(out, dtype=out.dtype)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, backward_fn)
    return t


class Tape:
    """Ordered view of the recorded ops reachable from one output."""

    def __init__(self, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.id in seen:
                continue
            seen.add(n.id)
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.id)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any differentiable leaf")
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = Tape(loss)
    grads = {loss.node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, ig)
            else:
                prev = grads.get(inp.node.id)
                grads[inp.node.id] = ig if prev is None else prev + ig


def _accumulate(leaf, g):
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.data.dtype, copy=True)
    else:
        leaf.grad += g


# --------------------------------------------------------------------------
# primitive ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), A @ B, bwd)


def linear(x, w):
    """``x @ w.T`` for x of shape [..., d_in] and w of shape [d_out, d_in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape} with weight {w.shape}")
    X, W = x.data, w.data

    def bwd(g):
        gx = g @ W if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, W.shape[0]).T @ X.reshape(-1, W.shape[1])
        return gx, gw

    return _record("linear", (x, w), X @ W.T, bwd)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum; ``b`` may also be a row vector over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    rowwise = b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]
    if not rowwise:
        _check_same("add", a, b)

    def bwd(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if rowwise else g
        return g, gb

    return _record("add", (a, b), a.data + b.data, bwd)


def mul(a, b):
    _check_same("mul", a, b)
    A, B = a.data, b.data

    def bwd(g):
        return (g * B if a.requires_grad else None,
                g * A if b.requires_grad else None)

    return _record("mul", (a, b), A * B, bwd)


def scale(a, c):
    c = float(c)
    return _record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def tsum(a):
    """Sum of all entries, as a scalar tensor."""
    shape, dtype = a.shape, a.dtype
    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=dtype),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def silu(x):
    X = x.data
    s = expit(X)

    def bwd(g):
        return (g * s * (1 + X * (1 - s)),)

    return _record("silu", (x,), X * s, bwd)


def rmsnorm(x, weight, eps):
    if eps <= 0:
        raise ConfigError(f"rmsnorm eps must be > 0, got {eps}", key="rms_eps")
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm weight {weight.shape} does not match x {x.shape}")
    X, Wt = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + eps)
    xhat = X * r

    def bwd(g):
        gw = (g * xhat).reshape(-1, Wt.shape[0]).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * Wt
            gx = r * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _record("rmsnorm", (x, weight), xhat * Wt, bwd)


def _softmax(X):
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x):
    y = _softmax(x.data)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, bwd)


def _check_ids(ids, n, what):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TokenIdError(f"{what} must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise TokenIdError(f"{what} {int(bad)} out of range [0, {n})")
    return ids


def embedding_lookup(table, ids):
    ids = _check_ids(ids, table.shape[0], "token id")
    T = table.data

    def bwd(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids.ravel(), g.reshape(-1, T.shape[1]))
        return (gt,)

    return _record("embedding", (table,), T[ids], bwd)


def cross_entropy(logits, targets):
    """Mean next-token negative log-likelihood over every position."""
    V = logits.shape[-1]
    targets = _check_ids(targets, V, "target id")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    L2 = logits.data.reshape(-1, V)
    t = targets.ravel()
    m = L2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(L2 - m).sum(axis=1))
    nll = lse - L2[np.arange(t.size), t]
    n = t.size
    loss = np.asarray(nll.sum() / n, dtype=L2.dtype)

    def bwd(g):
        p = np.exp(L2 - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape),)

    return _record("cross_entropy", (logits,), loss, bwd)


def split_heads(x, n_heads):
    """[B, T, H*hd] -> [B, H, T, hd]."""
    B, T, D = x.shape
    if D % n_heads:
        raise ShapeError(f"width {D} not divisible by {n_heads} heads")
    hd = D // n_heads
    out = x.data.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)
    return _record("split_heads", (x,), np.ascontiguousarray(out),
                   lambda g: (g.transpose(0, 2, 1, 3).reshape(B, T, D),))


def merge_heads(x):
    """[B, H, T, hd] -> [B, T, H*hd]."""
    B, H, T, hd = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(B, T, H * hd)
    return _record("merge_heads", (x,), out,
                   lambda g: (np.ascontiguousarray(g.reshape(B, T, H, hd).transpose(0, 2, 1, 3)),))


_rope_cache = {}


def rope_tables(positions, head_dim, base, dtype):
    key = (positions[0], len(positions), head_dim, float(base), np.dtype(dtype).str)
    hit = _rope_cache.get(key)
    if hit is not None:
        return hit
    half = head_dim // 2
    inv = 1.0 / (base ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=1).astype(dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=1).astype(dtype)
    if len(_rope_cache) > 4096:
        _rope_cache.clear()
    _rope_cache[key] = (cos, sin)
    return cos, sin


def rope(x, start, base):
    """Rotary position embedding on [B, H, T, hd] for positions start..start+T-1.

    Uses the half-split pairing: dimension i rotates with i + hd/2.
    """
    hd = x.shape[-1]
    if hd % 2:
        raise ShapeError(f"rotary embedding needs an even head dim, got {hd}")
    T = x.shape[2]
    cos, sin = rope_tables(np.arange(start, start + T), hd, base, x.dtype)
    X = x.data
    h = hd // 2
    rot = np.concatenate([-X[..., h:], X[..., :h]], axis=-1)

    def bwd(g):
        u = g * sin
        return (g * cos + np.concatenate([u[..., h:], -u[..., :h]], axis=-1),)

    return _record("rope", (x,), X * cos + rot * sin, bwd)


def causal_attention(q, k, v, q_start=0):
    """Scaled dot-product attention with a causal mask.

    q is [B, H, Tq, hd] for absolute positions q_start..q_start+Tq-1; k and v
    are [B, H, Tk, hd] for positions 0..Tk-1. Query i sees keys j <= q_start+i.
    """
    if k.shape != v.shape or q.shape[:2] != k.shape[:2] or q.shape[3] != k.shape[3]:
        raise ShapeError(f"attention shapes q {q.shape} k {k.shape} v {v.shape}")
    Q, K, V = q.data, k.data, v.data
    Tq, Tk = Q.shape[2], K.shape[2]
    if q_start + Tq > Tk:
        raise ShapeError(f"queries reach position {q_start + Tq - 1} but only {Tk} keys")
    sc = 1.0 / np.sqrt(Q.shape[-1])
    s = (Q @ K.swapaxes(-1, -2)) * Q.dtype.type(sc)
    if Tq > 1 or q_start + Tq < Tk:
        mask = np.arange(Tk)[None, :] > (q_start + np.arange(Tq))[:, None]
        s[..., mask] = -np.inf
    p = _softmax(s)

    def bwd(g):
        gv = p.swapaxes(-1, -2) @ g
        gp = g @ V.swapaxes(-1, -2)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * sc
        return gs @ K, gs.swapaxes(-1, -2) @ Q, gv

    return _record("attention", (q, k, v), p @ V, bwd)
