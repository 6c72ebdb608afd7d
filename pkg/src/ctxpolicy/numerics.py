"""Dense numeric kernels with reverse-mode gradients.

Everything is a numpy float64 array under the hood. A Tensor pairs an array
with a backward closure; backward() walks the tape in reverse topological
order. The documented contract is for 2-D (rows, cols) tensors; ops accept
extra leading batch axes and broadcast over them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-6

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


@dataclass
class OpCounter:
    """Instrumented attention counters, used by bench and cost assertions.

    key_tokens accumulates the attended key-row count once per attention
    call (heads inside one call count once); attention_macs estimates
    multiply-accumulates for score and value matmuls across heads.
    """

    attention_calls: int = 0
    key_tokens: int = 0
    query_rows: int = 0
    attention_macs: int = 0

    def reset(self) -> None:
        self.attention_calls = 0
        self.key_tokens = 0
        self.query_rows = 0
        self.attention_macs = 0

    def snapshot(self) -> dict:
        return {
            "attention_calls": self.attention_calls,
            "key_tokens": self.key_tokens,
            "query_rows": self.query_rows,
            "attention_macs": self.attention_macs,
        }


counter = OpCounter()


class Tensor:
    """A numpy array plus the tape hooks needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Arithmetic sugar; scalars and arrays both work via broadcasting.
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, smul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), smul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not a tape op")

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _needs_tape(*parents):
        live = tuple(p for p in parents if p.requires_grad)
        return Tensor(data, requires_grad=True, parents=live, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast up from `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def smul(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * s)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    # Stacked (..., T, K) @ (K, N) folds into one GEMM instead of a batch loop.
    if a.data.ndim > 2 and b.data.ndim == 2:
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        out_data = (a2 @ b.data).reshape(lead + (b.data.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return _make(out_data, (a, b), backward)

    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def concat(parts: list[Tensor], axis: int = -2) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + size)
                p._accumulate(g[tuple(idx)])
            offset += size

    return _make(out_data, tuple(parts), backward)


def tslice(t: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    idx = [slice(None)] * t.data.ndim
    ax = axis if axis >= 0 else t.data.ndim + axis
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out_data = t.data[idx]

    def backward(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        t._accumulate(full)

    return _make(out_data, (t,), backward)


def reshape(t: Tensor, shape: tuple) -> Tensor:
    out_data = t.data.reshape(shape)

    def backward(g):
        t._accumulate(g.reshape(t.data.shape))

    return _make(out_data, (t,), backward)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    out_data = np.swapaxes(t.data, a, b)

    def backward(g):
        t._accumulate(np.swapaxes(g, a, b))

    return _make(out_data, (t,), backward)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = t.data.mean(axis=axis, keepdims=keepdims)
    count = t.data.size if axis is None else t.data.shape[axis]

    def backward(g):
        if axis is None:
            t._accumulate(np.full_like(t.data, float(g) / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(gg / count, t.data.shape).copy())

    return _make(out_data, (t,), backward)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            t._accumulate(np.full_like(t.data, float(g)))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(gg, t.data.shape).copy())

    return _make(out_data, (t,), backward)


def silu(t: Tensor) -> Tensor:
    """x * sigmoid(x), computed without overflow for large |x|."""
    x = t.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out_data = x * s

    def backward(g):
        t._accumulate(g * (s * (1.0 + x * (1.0 - s))))

    return _make(out_data, (t,), backward)


def rms_norm(t: Tensor, gain: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Row-wise RMS normalization with a learned per-column gain.

    y = x / sqrt(mean(x^2, cols) + eps) * gain
    """
    x = t.data
    n = x.shape[-1]
    scale = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    out_data = x * scale * gain.data

    def backward(g):
        if t.requires_grad:
            gg = g * gain.data
            dot = (gg * x).sum(axis=-1, keepdims=True)
            t._accumulate(gg * scale - x * (scale**3) * dot / n)
        if gain.requires_grad:
            ggain = (g * x * scale).reshape(-1, n).sum(axis=0)
            gain._accumulate(ggain.reshape(gain.data.shape))

    return _make(out_data, (t, gain), backward)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax, stable under large magnitudes."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


_mask_bias_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    """0 / -inf additive bias for a boolean mask; validated and cached."""
    cached = _mask_bias_cache.get(id(mask))
    if cached is not None and cached[0] is mask:
        return cached[1]
    if not mask.any(axis=-1).all():
        raise ValueError("mask leaves a query row with no allowed keys")
    bias = np.where(mask, 0.0, -np.inf)
    _mask_bias_cache[id(mask)] = (mask, bias)
    if len(_mask_bias_cache) > 256:
        _mask_bias_cache.clear()
        _mask_bias_cache[id(mask)] = (mask, bias)
    return bias


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with boolean masking.

    q: (..., Tq, D), k/v: (..., Tk, D). mask is a bool (Tq, Tk) array, True
    where attention is allowed; disallowed scores become -inf before the
    softmax. Every query row must keep at least one allowed key.
    """
    d = q.data.shape[-1]
    if k.data.shape[-1] != d or v.data.shape[-2] != k.data.shape[-2]:
        raise ValueError(
            f"shape mismatch: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    tq, tk = q.data.shape[-2], k.data.shape[-2]
    if mask is not None and mask.shape != (tq, tk):
        raise ValueError(f"mask shape {mask.shape} != ({tq}, {tk})")

    heads = int(np.prod(q.data.shape[:-2], dtype=np.int64)) if q.data.ndim > 2 else 1
    counter.attention_calls += 1
    counter.key_tokens += tk
    counter.query_rows += tq
    counter.attention_macs += 2 * tq * tk * d * heads

    scale = 1.0 / math.sqrt(d)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if mask is not None:
        scores += _mask_bias(mask)
    # In-place softmax; exp(-inf) rows were ruled out by mask validation.
    # Non-finite inputs surface as NonFiniteError below, not as warnings.
    with np.errstate(invalid="ignore"):
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        weights = scores
        out_data = np.matmul(weights, v.data)
    if not np.isfinite(out_data.sum()):
        raise NonFiniteError("attention produced non-finite values")

    def backward(g):
        if v.requires_grad:
            gv = np.matmul(np.swapaxes(weights, -1, -2), g)
            v._accumulate(_unbroadcast(gv, v.data.shape))
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gscores = weights * (gw - (weights * gw).sum(axis=-1, keepdims=True))
        if q.requires_grad:
            gq = np.matmul(gscores, k.data) * scale
            q._accumulate(_unbroadcast(gq, q.data.shape))
        if k.requires_grad:
            gk = np.matmul(np.swapaxes(gscores, -1, -2), q.data) * scale
            k._accumulate(_unbroadcast(gk, k.data.shape))

    return _make(out_data, (q, k, v), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer id; grads scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"id out of range [0, {table.data.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(gt)

    return _make(out_data, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of integer targets under row softmax of logits.

    valid, when given, is a boolean array over target positions; positions
    marked False are excluded from the mean (their target value is ignored).
    """
    ids = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if ids.shape != x.shape[:-1]:
        raise ValueError(f"targets shape {ids.shape} != logit rows {x.shape[:-1]}")
    if valid is None:
        keep = np.ones(ids.shape, dtype=bool)
    else:
        keep = np.asarray(valid, dtype=bool)
        if keep.shape != ids.shape:
            raise ValueError("valid mask shape differs from targets")
        if not keep.any():
            raise ValueError("no valid target positions")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    flat_logp = logp.reshape(-1, x.shape[-1])
    flat_ids = np.where(keep, ids, 0).reshape(-1)
    flat_keep = keep.reshape(-1)
    count = int(flat_keep.sum())
    picked = flat_logp[np.arange(flat_ids.size), flat_ids]
    out_data = np.array(-(picked * flat_keep).sum() / count)

    def backward(g):
        probs = np.exp(flat_logp)
        probs[np.arange(flat_ids.size), flat_ids] -= 1.0
        probs *= flat_keep[:, None]
        logits._accumulate((float(g) / count) * probs.reshape(x.shape))

    return _make(out_data, (logits,), backward)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    diff = pred.data - np.asarray(target, dtype=np.float64)
    out_data = np.array((diff * diff).mean())

    def backward(g):
        pred._accumulate((2.0 * float(g) / diff.size) * diff)

    return _make(out_data, (pred,), backward)


# ---------------------------------------------------------------------------
# Orthonormal DCT-II / DCT-III along the last axis. Used by the action
# tokenizer; not a tape op.

_dct_cache: dict[int, np.ndarray] = {}


def _dct_matrix(n: int) -> np.ndarray:
    m = _dct_cache.get(n)
    if m is None:
        kk = np.arange(n)[:, None]
        nn = np.arange(n)[None, :]
        m = np.cos(np.pi * (2 * nn + 1) * kk / (2 * n)) * math.sqrt(2.0 / n)
        m[0] *= math.sqrt(0.5)
        _dct_cache[n] = m
    return m


def dct(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of each row (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("dct of empty signal")
    return x @ _dct_matrix(x.shape[-1]).T


def idct(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-III of each row; exact inverse of dct()."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("idct of empty signal")
    return x @ _dct_matrix(x.shape[-1])


# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, step: float = 1e-4) -> float:
    """Compare tape gradients of scalar f(x) against central differences.

    Returns the max relative error |a - fd| / (|a| + |fd| + 1e-8) over the
    entries of x. f must be a pure function of x (and of captured constants).
    """
    x.grad = None
    out = f(x)
    out.backward()
    if x.grad is None:
        raise ValueError("f(x) does not depend on x")
    analytic = x.grad.copy()
    x.grad = None

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
    rel = np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + 1e-8)
    return float(rel.max())
