"""Dense-tensor numeric core with tape-based reverse-mode differentiation.

Tensors wrap NumPy arrays (float64 by default, float32 opt-in). Operations
executed while a :class:`Tape` is active record themselves; ``backward`` then
replays the tape in reverse to accumulate gradients for leaf tensors created
with ``requires_grad=True``. With no active tape, ops run forward-only, which
is what inference uses.

Only the primitives the sequence model needs are provided: matmul, the usual
pointwise functions, softmax, gather/scatter for embedding and copy
distributions, and a few batched attention helpers.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class PoisonedUpdateError(RuntimeError):
    """A non-finite gradient reached the optimizer; the step was aborted."""


class Tensor:
    """A dense n-d array of reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_needs")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._needs = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations, replayed in reverse by backward."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out, fn):
        self.nodes.append(_Node(out, fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every reachable leaf that requires grad.

        Returns a dict keyed by leaf Tensor; leaves the loss does not depend on
        are absent. Each recorded node is visited exactly once.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss tensor was not recorded on this tape")
        grads: dict[Tensor, np.ndarray] = {}
        grads[loss] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.get(node.out)
            if g is None:
                continue
            node.fn(g, grads)
            if not node.out.requires_grad:
                del grads[node.out]
        return {t: g for t, g in grads.items() if t.requires_grad}


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, inputs, fn):
    tape = _active_tape()
    if tape is None:
        return
    out._needs = any(t._needs for t in inputs if isinstance(t, Tensor))
    if out._needs:
        tape._record(out, fn)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Functional alias for ``tape.backward(loss)``."""
    return tape.backward(loss)


def _acc(grads, t, val, fresh):
    """Add ``val`` into the gradient buffer of ``t``.

    ``fresh`` marks arrays the caller owns; aliased views are copied on first
    touch so later in-place accumulation cannot corrupt a neighbour's buffer.
    """
    if not t._needs:
        return
    buf = grads.get(t)
    if buf is None:
        grads[t] = val if fresh else val.copy()
    else:
        buf += val


def _zeros_buf(grads, t):
    buf = grads.get(t)
    if buf is None:
        buf = np.zeros_like(t.data)
        grads[t] = buf
    return buf


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors; recorded on the active tape."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def fn(g, grads):
        if a._needs:
            _acc(grads, a, g @ b.data.T, fresh=True)
        if b._needs:
            _acc(grads, b, a.data.T @ g, fresh=True)

    _record(out, (a, b), fn)
    return out


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)

    def fn(g, grads):
        ga = _unbroadcast(g, a.shape)
        _acc(grads, a, ga, fresh=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _acc(grads, b, gb, fresh=gb is not g)

    _record(out, (a, b), fn)
    return out


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)

    def fn(g, grads):
        ga = _unbroadcast(g, a.shape)
        _acc(grads, a, ga, fresh=ga is not g)
        _acc(grads, b, _unbroadcast(-g, b.shape), fresh=True)

    _record(out, (a, b), fn)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with NumPy broadcasting."""
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)

    def fn(g, grads):
        if a._needs:
            _acc(grads, a, _unbroadcast(g * b.data, a.shape), fresh=True)
        if b._needs:
            _acc(grads, b, _unbroadcast(g * a.data, b.shape), fresh=True)

    _record(out, (a, b), fn)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def fn(g, grads):
        _acc(grads, a, -g, fresh=True)

    _record(out, (a,), fn)
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def fn(g, grads):
        _acc(grads, a, g * y * (1.0 - y), fresh=True)

    _record(out, (a,), fn)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def fn(g, grads):
        _acc(grads, a, g * (1.0 - y * y), fresh=True)

    _record(out, (a,), fn)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def fn(g, grads):
        _acc(grads, a, g * (a.data > 0), fresh=True)

    _record(out, (a,), fn)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def fn(g, grads):
        _acc(grads, a, g / a.data, fresh=True)

    _record(out, (a,), fn)
    return out


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by 1/(1-p).

    Identity in eval mode, so no train/eval rescaling is needed downstream.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype)
    keep /= 1.0 - p
    out = Tensor(a.data * keep)

    def fn(g, grads):
        _acc(grads, a, g * keep, fresh=True)

    _record(out, (a,), fn)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def fn(g, grads):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(grads, a, y * (g - dot), fresh=True)

    _record(out, (a,), fn)
    return out


# ---------------------------------------------------------------------------
# shape and indexing primitives


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def fn(g, grads):
        _acc(grads, a, g.reshape(a.shape), fresh=False)

    _record(out, (a,), fn)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g, grads):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(grads, t, piece, fresh=False)

    _record(out, tuple(tensors), fn)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def fn(g, grads):
        for i, t in enumerate(tensors):
            _acc(grads, t, np.take(g, i, axis=axis), fresh=False)

    _record(out, tuple(tensors), fn)
    return out


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start:stop) of a 2-d tensor."""
    out = Tensor(a.data[:, start:stop])

    def fn(g, grads):
        buf = _zeros_buf(grads, a)
        buf[:, start:stop] += g

    _record(out, (a,), fn)
    return out


def time_slice(a: Tensor, t: int) -> Tensor:
    """Step t of a [batch, time, dim] tensor -> [batch, dim]."""
    out = Tensor(a.data[:, t, :])

    def fn(g, grads):
        buf = _zeros_buf(grads, a)
        buf[:, t, :] += g

    _record(out, (a,), fn)
    return out


def gather_time(a: Tensor, positions) -> Tensor:
    """Per-example step pick from [batch, time, dim]: out[b] = a[b, positions[b]]."""
    pos = np.asarray(positions, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, pos, :])

    def fn(g, grads):
        buf = _zeros_buf(grads, a)
        buf[rows, pos, :] += g

    _record(out, (a,), fn)
    return out


def gather_rows(a: Tensor, ids) -> Tensor:
    """Rows of a 2-d tensor selected by an int index vector (with repeats)."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for table with {a.shape[0]} rows")
    out = Tensor(a.data[ids])

    def fn(g, grads):
        # flat bincount beats np.add.at for this scatter by a wide margin
        d = a.shape[1]
        flat = (ids[:, None] * d + np.arange(d)).ravel()
        contrib = np.bincount(flat, weights=g.ravel(), minlength=a.size)
        _acc(grads, a, contrib.reshape(a.shape).astype(a.dtype, copy=False), fresh=True)

    _record(out, (a,), fn)
    return out


def take_per_row(a: Tensor, idx) -> Tensor:
    """a[r, idx[r]] for each row r -> 1-d tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def fn(g, grads):
        buf = _zeros_buf(grads, a)
        buf[rows, idx] += g

    _record(out, (a,), fn)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g, grads):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(grads, a, np.broadcast_to(gg, a.shape), fresh=False)

    _record(out, (a,), fn)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size if axis is None else a.shape[axis]

    def fn(g, grads):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(grads, a, np.broadcast_to(gg, a.shape) / n, fresh=True)

    _record(out, (a,), fn)
    return out


# ---------------------------------------------------------------------------
# batched attention / copy primitives


def attn_scores(h_seq: Tensor, q: Tensor) -> Tensor:
    """Per-row dot products: scores[r, t] = h_seq[r, t] . q[r] for [R,T,H],[R,H]."""
    out = Tensor(np.matmul(h_seq.data, q.data[:, :, None])[:, :, 0])

    def fn(g, grads):
        if h_seq._needs:
            _acc(grads, h_seq, g[:, :, None] * q.data[:, None, :], fresh=True)
        if q._needs:
            _acc(grads, q, np.matmul(g[:, None, :], h_seq.data)[:, 0, :], fresh=True)

    _record(out, (h_seq, q), fn)
    return out


def attn_context(w: Tensor, h_seq: Tensor) -> Tensor:
    """Weighted sum over time: context[r] = sum_t w[r, t] * h_seq[r, t]."""
    out = Tensor(np.matmul(w.data[:, None, :], h_seq.data)[:, 0, :])

    def fn(g, grads):
        if w._needs:
            _acc(grads, w, np.matmul(h_seq.data, g[:, :, None])[:, :, 0], fresh=True)
        if h_seq._needs:
            _acc(grads, h_seq, w.data[:, :, None] * g[:, None, :], fresh=True)

    _record(out, (w, h_seq), fn)
    return out


def attn_scores_grouped(h_seq: Tensor, q: Tensor) -> Tensor:
    """Grouped attention scores: [B,T,H] x [B,N,H] -> [B,N,T].

    Equivalent to expanding each example's states N times and calling
    attn_scores, but stays in batched-GEMM land with no [B*N, T, H] temps.
    """
    out = Tensor(np.matmul(q.data, h_seq.data.transpose(0, 2, 1)))

    def fn(g, grads):
        if q._needs:
            _acc(grads, q, np.matmul(g, h_seq.data), fresh=True)
        if h_seq._needs:
            _acc(grads, h_seq, np.matmul(g.transpose(0, 2, 1), q.data), fresh=True)

    _record(out, (h_seq, q), fn)
    return out


def attn_context_grouped(w: Tensor, h_seq: Tensor) -> Tensor:
    """Grouped contexts: [B,N,T] weights over [B,T,H] states -> [B,N,H]."""
    out = Tensor(np.matmul(w.data, h_seq.data))

    def fn(g, grads):
        if w._needs:
            _acc(grads, w, np.matmul(g, h_seq.data.transpose(0, 2, 1)), fresh=True)
        if h_seq._needs:
            _acc(grads, h_seq, np.matmul(w.data.transpose(0, 2, 1), g), fresh=True)

    _record(out, (w, h_seq), fn)
    return out


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Repeat each leading-axis entry n times consecutively."""
    out = Tensor(np.repeat(a.data, n, axis=0))

    def fn(g, grads):
        _acc(grads, a, g.reshape((a.shape[0], n) + a.shape[1:]).sum(axis=1), fresh=True)

    _record(out, (a,), fn)
    return out


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Tile the whole array n times along the leading axis."""
    out = Tensor(np.tile(a.data, (n,) + (1,) * (a.ndim - 1)))

    def fn(g, grads):
        _acc(grads, a, g.reshape((n,) + a.shape).sum(axis=0), fresh=True)

    _record(out, (a,), fn)
    return out


def scatter_to_vocab(w: Tensor, ids, vocab_size: int) -> Tensor:
    """Scatter-add per-position weights onto vocab ids: out[r, ids[r, t]] += w[r, t]."""
    ids = np.asarray(ids, dtype=np.intp)
    rows, cols = w.shape
    flat = (np.arange(rows)[:, None] * vocab_size + ids).ravel()
    data = np.bincount(flat, weights=w.data.ravel(), minlength=rows * vocab_size)
    out = Tensor(data.reshape(rows, vocab_size).astype(w.dtype, copy=False))
    row_idx = np.arange(rows)[:, None]

    def fn(g, grads):
        _acc(grads, w, g[row_idx, ids], fresh=True)

    _record(out, (w,), fn)
    return out


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor,
             b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One fused GRU step for a [rows, d_in] input and [rows, H] state.

    Gate layout along the 3H axis is reset, update, candidate:
        r = sigmoid(x Wi_r + b_r + h Wh_r + c_r)
        z = sigmoid(x Wi_z + b_z + h Wh_z + c_z)
        n = tanh(x Wi_n + b_n + r * (h Wh_n + c_n))
        out = (1 - z) * n + z * h

    Fused into a single tape node; the hand-written backward avoids the
    per-gate graph overhead that dominates step-loop training otherwise.
    """
    H = h.shape[1]
    gi = x.data @ w_ih.data + b_ih.data
    gh = h.data @ w_hh.data + b_hh.data
    with np.errstate(over="ignore"):
        r = 1.0 / (1.0 + np.exp(-(gi[:, :H] + gh[:, :H])))
        z = 1.0 / (1.0 + np.exp(-(gi[:, H:2 * H] + gh[:, H:2 * H])))
    gh_n = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * gh_n)
    out = Tensor((1.0 - z) * n + z * h.data)

    def fn(g, grads):
        dn = g * (1.0 - z)
        dtanh = dn * (1.0 - n * n)
        dz = g * (h.data - n) * z * (1.0 - z)
        dr = dtanh * gh_n * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dtanh], axis=1)
        dgh = np.concatenate([dr, dz, dtanh * r], axis=1)
        if x._needs:
            _acc(grads, x, dgi @ w_ih.data.T, fresh=True)
        if h._needs:
            _acc(grads, h, g * z + dgh @ w_hh.data.T, fresh=True)
        if w_ih._needs:
            _acc(grads, w_ih, x.data.T @ dgi, fresh=True)
        if w_hh._needs:
            _acc(grads, w_hh, h.data.T @ dgh, fresh=True)
        if b_ih._needs:
            _acc(grads, b_ih, dgi.sum(axis=0), fresh=True)
        if b_hh._needs:
            _acc(grads, b_hh, dgh.sum(axis=0), fresh=True)

    _record(out, (x, h, w_ih, w_hh, b_ih, b_hh), fn)
    return out


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second-moment accumulators plus step counter for a parameter set."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {p: np.zeros_like(p.data) for p in self.params}
        self.v = {p: np.zeros_like(p.data) for p in self.params}


def adam_step(params, grads: dict, state: AdamState) -> AdamState:
    """One Adam update with bias correction, in place on the parameter tensors.

    Parameters without an entry in ``grads`` are treated as zero-gradient (their
    moments still decay). Any non-finite gradient aborts the whole step before
    any parameter is touched.
    """
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise PoisonedUpdateError(
                f"non-finite gradient for parameter with shape {p.shape}; step aborted"
            )
        if g is not None and g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in params:
        g = grads.get(p)
        m, v = state.m[p], state.v[p]
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return float(norm)
