"""Dense tensors with reverse-mode automatic differentiation.

A small tape: every differentiable operation returns a `Tensor` that
remembers its parents and a closure computing parent gradients from its own
output gradient. `GradGraph` walks the tape once in reverse topological
order and hands back a gradient per leaf.

Numerics are float32 by default; build leaves with dtype=np.float64 when a
computation feeds a finite-difference check. Kernels are plain numpy and
therefore deterministic for identical inputs within one build.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

# Toggled by strict_finite(); when on, every kernel output is scanned.
_FINITE_CHECKS = False


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the gradient tape (e.g. backward from a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class strict_finite:
    """Context manager: scan every kernel output for NaN/Inf."""

    def __enter__(self):
        global _FINITE_CHECKS
        self._prev = _FINITE_CHECKS
        _FINITE_CHECKS = True
        return self

    def __exit__(self, *exc):
        global _FINITE_CHECKS
        _FINITE_CHECKS = self._prev
        return False


class Tensor:
    """An n-dimensional float array, optionally recorded on the tape.

    Leaves are built with `tensor(...)` (constant) or `parameter(...)`
    (receives a gradient). Operation outputs carry `parents` and a
    `backward_fn` mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False,
                 name=None):
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        if _FINITE_CHECKS and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this tensor: no gradient flows through it."""
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, name={self.name!r})"


def tensor(data, dtype=DEFAULT_DTYPE, name=None) -> Tensor:
    """Constant leaf from array-like data."""
    return Tensor(np.asarray(data, dtype=dtype), name=name)


def parameter(data, dtype=DEFAULT_DTYPE, name=None) -> Tensor:
    """Learnable leaf: receives a gradient from GradGraph.backward()."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _out(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad or p.parents for p in parents):
        return Tensor(data, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: the single broadcast this library allows."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs {b.shape}")
    _same_dtype(x, b)

    def back(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _out(x.data + b.data, (x, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _out(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return _out(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _out(x.data * c, (x,), lambda g: (g * c,))


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at exact equality (np.sign(0) == 0)."""
    return _out(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate gaussian error linear unit."""
    dt = x.data.dtype
    k = dt.type(np.sqrt(2.0 / np.pi))
    c = dt.type(0.044715)
    half = dt.type(0.5)
    one = dt.type(1.0)
    inner = k * (x.data + c * x.data ** 3)
    t = np.tanh(inner)
    out = half * x.data * (one + t)

    def back(g):
        dinner = k * (one + 3 * c * x.data ** 2)
        dx = half * (one + t) + half * x.data * (one - t * t) * dinner
        return (g * dx,)

    return _out(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    return _out(x.data.reshape(shape), (x,),
                lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _out(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                lambda g: (g.transpose(inv),))


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""

    def back(g):
        return (np.broadcast_to(g[..., None], x.data.shape).astype(x.data.dtype, copy=True),)

    return _out(x.data.sum(axis=-1), (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.full(x.data.shape, g / n, dtype=x.data.dtype),)

    return _out(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    def back(g):
        return (np.full(x.data.shape, g, dtype=x.data.dtype),)

    return _out(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    _same_dtype(a, b)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _out(a.data @ b.data, (a, b), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; scatter-add on the way back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding: id out of range")

    def back(g):
        dt = np.zeros(table.data.shape, dtype=table.data.dtype)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _out(table.data[ids], (table,), back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; used to pull aligned distribution rows."""
    idx = np.asarray(idx)
    if x.data.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")

    def back(g):
        dx = np.zeros(x.data.shape, dtype=x.data.dtype)
        np.add.at(dx, idx, g)
        return (dx,)

    return _out(x.data[idx], (x,), back)


# ---------------------------------------------------------------------------
# normalization, softmax, losses

LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},)")
    _same_dtype(x, gain, bias)
    dt = x.data.dtype
    eps = dt.type(LAYER_NORM_EPS)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = (-1, d)
        gh = (g * gain.data).reshape(lead)
        xh = xhat.reshape(lead)
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xh).mean(axis=-1, keepdims=True)
        dx = (inv.reshape(-1, 1) * (gh - m1 - xh * m2)).reshape(x.data.shape)
        dgain = (g * xhat).reshape(lead).sum(axis=0)
        dbias = g.reshape(lead).sum(axis=0)
        return dx.astype(dt, copy=False), dgain.astype(dt, copy=False), dbias.astype(dt, copy=False)

    return _out(out, (x, gain, bias), back)


def _softmax_data(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    p = _softmax_data(x.data)

    def back(g):
        s = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - s),)

    return _out(p, (x,), back)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] via log-sum-exp.

    A target of -1 marks a row that contributes no loss (padding).
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy_logits: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[1]
    if targets.size and targets.max() >= v:
        raise IndexError(f"target id >= vocab size {v}")
    if targets.size and targets.min() < -1:
        raise IndexError("target id < -1")
    valid = targets >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DimensionError("cross_entropy_logits: no valid targets")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.nonzero(valid)[0]
    picked = x[rows, targets[rows]]
    loss = (lse[rows] - picked).sum() / n_valid

    def back(g):
        p = _softmax_data(x)
        p[~valid] = 0.0
        p[rows, targets[rows]] -= 1.0
        return ((g / n_valid) * p,)

    return _out(np.asarray(loss, dtype=x.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# attention kernels (fused per sublayer to keep the tape short)


def attn_scores(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot-product scores.

    q: [B, H, T, dh]; k: [B, S, dh] (one shared key head) or [B, S, H, dh].
    Result: [B, H, T, S].
    """
    _same_dtype(q, k)
    dh = q.shape[-1]
    sc = q.data.dtype.type(1.0 / np.sqrt(dh))
    if k.data.ndim == 3:
        out = np.einsum("bhtd,bsd->bhts", q.data, k.data) * sc

        def back(g):
            gs = g * sc
            dq = np.einsum("bhts,bsd->bhtd", gs, k.data)
            dk = np.einsum("bhts,bhtd->bsd", gs, q.data)
            return dq, dk
    else:
        out = np.einsum("bhtd,bshd->bhts", q.data, k.data) * sc

        def back(g):
            gs = g * sc
            dq = np.einsum("bhts,bshd->bhtd", gs, k.data)
            dk = np.einsum("bhts,bhtd->bshd", gs, q.data)
            return dq, dk

    return _out(out, (q, k), back)


def causal_softmax(scores: Tensor, offset: int = 0) -> Tensor:
    """Softmax over the key axis with a causal mask.

    Query t may attend keys s <= t + offset; offset is the number of cached
    positions preceding the queries during incremental decoding.
    """
    b, h, t, s = scores.data.shape
    if offset + t != s:
        raise DimensionError(f"causal_softmax: offset {offset} + T {t} != S {s}")
    mask = np.tril(np.ones((t, s), dtype=bool), k=offset)
    x = np.where(mask, scores.data, -np.inf)
    p = _softmax_data(x).astype(scores.data.dtype, copy=False)

    def back(g):
        dp = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dp),)

    return _out(p, (scores,), back)


def attn_mix(probs: Tensor, v: Tensor) -> Tensor:
    """Probability-weighted value mix: [B,H,T,S] x values -> [B,H,T,dh]."""
    _same_dtype(probs, v)
    if v.data.ndim == 3:
        out = np.einsum("bhts,bsd->bhtd", probs.data, v.data)

        def back(g):
            dp = np.einsum("bhtd,bsd->bhts", g, v.data)
            dv = np.einsum("bhts,bhtd->bsd", probs.data, g)
            return dp, dv
    else:
        out = np.einsum("bhts,bshd->bhtd", probs.data, v.data)

        def back(g):
            dp = np.einsum("bhtd,bshd->bhts", g, v.data)
            dv = np.einsum("bhts,bhtd->bshd", probs.data, g)
            return dp, dv

    return _out(out, (probs, v), back)


# ---------------------------------------------------------------------------
# the tape


class GradGraph:
    """Reverse-mode sweep rooted at a scalar loss node.

    The recorded operations reachable from the root are visited exactly once,
    in reverse topological order; the result maps each leaf tensor that
    requires a gradient to an array shaped like the leaf.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {loss.shape}")
        self.root = loss
        self._order = self._toposort(loss)

    @staticmethod
    def _toposort(root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    def backward(self) -> dict[Tensor, np.ndarray]:
        grads: dict[int, np.ndarray] = {
            id(self.root): np.ones((), dtype=self.root.data.dtype)
            if self.root.data.ndim == 0
            else np.ones(self.root.data.shape, dtype=self.root.data.dtype)
        }
        result: dict[Tensor, np.ndarray] = {}
        for node in reversed(self._order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                result[node] = g
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not (p.requires_grad or p.parents):
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = pg
                else:
                    # never in place: backward_fns may hand out shared arrays
                    grads[id(p)] = acc + pg
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Convenience wrapper: build the graph for `loss` and sweep it."""
    return GradGraph(loss).backward()
