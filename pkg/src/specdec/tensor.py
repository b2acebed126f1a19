"""Dense-tensor math with reverse-mode automatic differentiation.

Tensors wrap float32 numpy arrays (float64 is accepted everywhere for
oracle-grade math); reductions accumulate in float64 before casting back
to the storage dtype.  Differentiable ops append an entry to a global
tape; ``backward`` replays the tape once, in reverse recorded order.
The tape is rebuilt from scratch every training step, and inference code
runs inside ``no_grad()`` so the tape stays empty.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class Tensor:
    """A dense n-d array, optionally tracked for gradients.

    ``grad`` is allocated lazily and always matches ``data``'s shape.
    A tensor with ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        """A view of the same storage, off the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        return out

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; keyword args go through the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _TapeEntry:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE: list[_TapeEntry] = []
_GRAD_ENABLED = True


def tape_size():
    return len(_TAPE)


def clear_tape():
    """Drop recorded ops and their intermediate gradients.

    Parameter data is untouched; only gradient state of recorded
    outputs is reset.
    """
    for entry in _TAPE:
        entry.out.grad = None
    _TAPE.clear()


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out, parents, backward_fn):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.append(_TapeEntry(out, parents, backward_fn))
    return out


def backward(loss):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Replays the global tape in reverse recorded order; each entry is
    visited exactly once.  Leaves unrelated to ``loss`` keep grad None,
    which reads as zero.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (requires_grad is False)")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(_TAPE):
        g = entry.out.grad
        if g is None:
            continue
        parent_grads = entry.backward_fn(g)
        for parent, pg in zip(entry.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            parent.accumulate_grad(pg)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def bw(g):
        return (
            _unbroadcast(g, a.data.shape).astype(a.dtype),
            _unbroadcast(g, b.data.shape).astype(b.dtype),
        )

    return _record(out, (a, b), bw)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)

    def bw(g):
        return (
            _unbroadcast(g, a.data.shape).astype(a.dtype),
            -_unbroadcast(g, b.data.shape).astype(b.dtype),
        )

    return _record(out, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape).astype(a.dtype),
            _unbroadcast(g * a.data, b.data.shape).astype(b.dtype),
        )

    return _record(out, (a, b), bw)


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)

    def bw(g):
        return (g * s,)

    return _record(out, (a,), bw)


def add_const(a, c):
    """Add a constant array (no gradient flows into ``c``)."""
    c = np.asarray(c)
    out = Tensor(a.data + c.astype(a.dtype, copy=False))

    def bw(g):
        return (_unbroadcast(g, a.data.shape).astype(a.dtype),)

    return _record(out, (a,), bw)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), bw)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, (x,), bw)


def concat_last(tensors):
    """Concatenate along the last axis."""
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=-1))
    sizes = [d.shape[-1] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[..., offsets[i]: offsets[i + 1]] for i in range(len(sizes)))

    return _record(out, tuple(tensors), bw)


def split_last(x, sizes):
    """Split along the last axis into chunks of the given sizes."""
    if sum(sizes) != x.data.shape[-1]:
        raise DimensionError(f"split sizes {sizes} do not cover last axis {x.data.shape[-1]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        lo, hi = offsets[i], offsets[i + 1]
        piece = Tensor(x.data[..., lo:hi])

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)

        outs.append(_record(piece, (x,), bw))
    return outs


# ---------------------------------------------------------------------------
# matmul / lookup


def matmul(a, b):
    """Matrix product; rank 2 or batched rank 3 with broadcasting."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            _unbroadcast(ga, a.data.shape).astype(a.dtype),
            _unbroadcast(gb, b.data.shape).astype(b.dtype),
        )

    return _record(out, (a, b), bw)


def embedding(table, ids):
    """Row lookup: out[..., :] = table[ids[...]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record(out, (table,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations (float64 accumulation, index order)


def sum_all(x):
    out = Tensor(np.array(x.data.sum(dtype=np.float64), dtype=x.dtype))

    def bw(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return _record(out, (x,), bw)


def mean_all(x):
    n = x.data.size
    out = Tensor(np.array(x.data.sum(dtype=np.float64) / n, dtype=x.dtype))

    def bw(g):
        return (np.full_like(x.data, g.reshape(-1)[0] / n),)

    return _record(out, (x,), bw)


def rms_norm(x, weight, eps=1e-5):
    """Root-mean-square normalization over the last axis."""
    ms = np.mean(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    normed = x.data * inv
    out = Tensor(normed * weight.data)
    n = x.data.shape[-1]

    def bw(g):
        gw_term = g * weight.data
        # d/dx of x * (mean(x^2)+eps)^-1/2
        dot = np.sum(gw_term * x.data, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        gx = gw_term * inv - x.data * (inv ** 3) * (dot / n)
        gw = np.sum(g * normed, axis=tuple(range(g.ndim - 1)), dtype=np.float64).astype(weight.dtype)
        return (gx, gw)

    return _record(out, (x, weight), bw)


def softmax(x, axis=-1):
    """Numerically stable softmax; rows sum to 1 within 1e-6."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = Tensor((e / denom).astype(x.dtype))

    def bw(g):
        y = out.data
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (y * (g - dot),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# losses


def _prep_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=np.float64)
    m = np.asarray(mask)
    if m.shape != shape:
        raise DimensionError(f"mask shape {m.shape} does not match positions {shape}")
    return m.astype(np.float64)


def cross_entropy(logits, probs, mask=None):
    """Mean over masked-in positions of -sum(probs * log_softmax(logits)).

    ``probs`` rows are target distributions and receive no gradient;
    positions with mask 0 contribute exactly zero.  An all-masked batch
    yields zero loss and a warning.
    """
    if logits.data.shape != probs.data.shape:
        raise DimensionError(
            f"logits shape {logits.data.shape} does not match probs shape {probs.data.shape}"
        )
    m = _prep_mask(mask, logits.data.shape[:-1])
    count = m.sum()
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    per_pos = -(probs.data.astype(np.float64) * logp).sum(axis=-1)
    if count == 0:
        warnings.warn("cross_entropy: every position is masked out; loss is 0")
        out = Tensor(np.zeros((), dtype=logits.dtype))
        return _record(out, (logits,), lambda g: (np.zeros_like(logits.data),))
    out = Tensor(np.asarray((per_pos * m).sum() / count, dtype=logits.dtype))
    soft = np.exp(logp)

    def bw(g):
        coeff = (m / count)[..., None] * g.reshape(-1)[0]
        return ((soft - probs.data.astype(np.float64)) * coeff,)

    return _record(out, (logits,), bw)


def cross_entropy_labels(logits, labels, mask=None):
    """cross_entropy against one-hot rows given as integer labels."""
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits positions {logits.data.shape[:-1]}"
        )
    m = _prep_mask(mask, labels.shape)
    count = m.sum()
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    if count == 0:
        warnings.warn("cross_entropy_labels: every position is masked out; loss is 0")
        out = Tensor(np.zeros((), dtype=logits.dtype))
        return _record(out, (logits,), lambda g: (np.zeros_like(logits.data),))
    out = Tensor(np.asarray(-(picked * m).sum() / count, dtype=logits.dtype))
    soft = np.exp(logp)

    def bw(g):
        grad = soft.copy()
        np.subtract.at(grad.reshape(-1, grad.shape[-1]),
                       (np.arange(labels.size), labels.reshape(-1)), 1.0)
        coeff = (m / count)[..., None] * g.reshape(-1)[0]
        return (grad * coeff,)

    return _record(out, (logits,), bw)


def smooth_l1(a, b, mask=None):
    """Huber-style loss: 0.5*d^2 for |d|<1 else |d|-0.5, mean over masked-in elements.

    ``mask`` covers leading axes; every element under a masked-in
    position contributes.
    """
    if a.data.shape != b.data.shape:
        raise DimensionError(f"smooth_l1 operand shapes differ: {a.data.shape} vs {b.data.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    per_elem = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    if mask is None:
        m = np.ones(a.data.shape[:1] if a.data.ndim == 1 else a.data.shape[:-1], dtype=np.float64)
    else:
        m = np.asarray(mask).astype(np.float64)
    if a.data.ndim == m.ndim:
        mexp = m
    else:
        mexp = m.reshape(m.shape + (1,) * (a.data.ndim - m.ndim))
    count = (mexp * np.ones_like(per_elem)).sum()
    if count == 0:
        warnings.warn("smooth_l1: every position is masked out; loss is 0")
        out = Tensor(np.zeros((), dtype=a.dtype))
        return _record(out, (a, b), lambda g: (np.zeros_like(a.data), np.zeros_like(b.data)))
    out = Tensor(np.asarray((per_elem * mexp).sum() / count, dtype=a.dtype))

    def bw(g):
        ga = np.clip(d, -1.0, 1.0) * mexp / count * g.reshape(-1)[0]
        return (ga, -ga)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam with global-norm gradient clipping."""

    def __init__(self, params, lr=5e-5, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.0, clip_norm=0.5):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self):
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self):
        self.t += 1
        clip_scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                clip_scale = self.clip_norm / (norm + 1e-12)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g * clip_scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
