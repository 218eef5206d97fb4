"""Dense tensors with reverse-mode automatic differentiation.

Only what a 1-D convolutional audio network needs: broadcasting arithmetic,
matrix products, ``conv1d``, max pooling, layer/batch normalisation, a few
pointwise maps and reductions.  Every op records its parents and a closure
computing the vector-Jacobian product; :class:`Tape` orders the recorded ops
topologically for a single reverse sweep.

Precision is a process-wide setting (32-bit by default).  Reductions
accumulate in 64-bit regardless.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatchError,
    DimensionError,
    DomainError,
    EmptyReductionError,
    RankError,
)

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}

LEAKY_SLOPE = 0.2
# Upper bound on the im2col buffer built by conv1d, in elements.
_CONV_BLOCK = 1 << 23
# Kernels at least this long (stride 1) are correlated through the FFT.
_FFT_MIN_KLEN = 16


def get_dtype():
    return _state["dtype"]


def set_precision(bits):
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state["dtype"] = np.dtype(np.float32 if bits == 32 else np.float64)


@contextlib.contextmanager
def precision(bits):
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference is tape-free)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled():
    return _state["grad_enabled"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        dtype = get_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp):
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape and reverse sweep
# ---------------------------------------------------------------------------
class Tape:
    """Topologically ordered record of the ops that produced a tensor.

    ``ops[i]`` never depends on ``ops[j]`` for ``j > i``; a reverse sweep
    visits each op once.
    """

    def __init__(self, ops):
        self.ops = ops

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._vjp is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._vjp is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.ops)

    def backward(self, loss, seed=None):
        grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, loss.data.dtype)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            pgrads = node._vjp(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._vjp is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        if loss._vjp is None and loss.requires_grad:
            seed_grad = np.ones_like(loss.data)
            loss.grad = seed_grad if loss.grad is None else loss.grad + seed_grad


def backward(loss):
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate: calling twice without clearing doubles them.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_output(loss).backward(loss)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), vjp)


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g / (2 * out),))


def absolute(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------
def relu(a):
    ad = a.data
    return _record(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def leaky_relu(a, slope=None):
    slope = LEAKY_SLOPE if slope is None else slope
    ad = a.data
    scale = np.where(ad > 0, 1.0, slope).astype(ad.dtype)
    return _record(ad * scale, (a,), lambda g: (g * scale,))


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    ad = a.data
    out = np.logaddexp(0, ad).astype(ad.dtype)

    def vjp(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _record(out, (a,), vjp)


def pointwise(a, kind, slope=None):
    a = as_tensor(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    fn = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
          "softplus": softplus, "abs": absolute}.get(kind)
    if fn is None:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return fn(a)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------
def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index):
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(a, kind, axis=None, keepdims=False):
    """Sum, mean or logsumexp over ``axis`` (all axes when None).

    Accumulation happens in 64-bit; logsumexp subtracts the maximum first.
    """
    a = as_tensor(a)
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    count = int(np.prod([ad.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise EmptyReductionError(f"reduction over an empty axis of shape {ad.shape}")
    dtype = ad.dtype

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if kind == "sum":
        out = ad.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(dtype)
        return _record(out, (a,), lambda g: (np.broadcast_to(expand(g), ad.shape).astype(dtype),))
    if kind == "mean":
        out = ad.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(dtype)
        return _record(out, (a,), lambda g: (np.broadcast_to(expand(g) / count, ad.shape).astype(dtype),))
    if kind == "logsumexp":
        wide = ad.astype(np.float64)
        m = wide.max(axis=axes, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        lse = np.log(np.exp(wide - m).sum(axis=axes, keepdims=True)) + m
        soft = np.exp(wide - lse).astype(dtype)
        out = lse if keepdims else np.squeeze(lse, axis=axes)
        return _record(out.astype(dtype), (a,), lambda g: (expand(g) * soft,))
    raise ValueError(f"unknown reduction {kind!r}")


def logsumexp(a, axis=None, keepdims=False):
    return reduce(a, "logsumexp", axis, keepdims)


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Linear algebra and layers
# ---------------------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if ad.ndim != 2 or bd.ndim != 2:
        raise DimensionError("matmul supports rank-2 operands only")
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects [batch, in] and [out, in], got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear input width {x.shape[1]} != weight in-width {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _record(out, parents, vjp)


def _conv_blocks(batch, per_item):
    step = max(1, _CONV_BLOCK // max(per_item, 1))
    return [(s, min(s + step, batch)) for s in range(0, batch, step)]


def conv1d(x, kernels, stride=1):
    """Valid cross-correlation: ``out[b,o,t] = sum_{i,k} x[b,i,t*s+k] * w[o,i,k]``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d expects rank-3 operands, got {x.shape} and {kernels.shape}")
    batch, in_ch, time = x.shape
    out_ch, k_in, klen = kernels.shape
    if k_in != in_ch:
        raise DimensionError(f"conv1d channel mismatch: input has {in_ch}, kernels expect {k_in}")
    if klen > time:
        raise DimensionError(f"conv1d kernel length {klen} exceeds input length {time}")
    if stride < 1:
        raise DimensionError(f"conv1d stride must be >= 1, got {stride}")
    out_t = (time - klen) // stride + 1
    xd, wd = x.data, kernels.data
    if stride == 1 and klen >= _FFT_MIN_KLEN:
        return _conv1d_fft(x, kernels, out_t)
    wflat = wd.reshape(out_ch, in_ch * klen)
    span = (out_t - 1) * stride + 1
    blocks = _conv_blocks(batch, out_t * in_ch * klen)

    def columns(lo, hi):
        win = sliding_window_view(xd[lo:hi], klen, axis=2)[:, :, :span:stride]
        # [b, i*k, t]
        return win.transpose(0, 1, 3, 2).reshape(hi - lo, in_ch * klen, out_t)

    out = np.empty((batch, out_ch, out_t), dtype=xd.dtype)
    for lo, hi in blocks:
        out[lo:hi] = wflat @ columns(lo, hi)

    def vjp(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wflat) if kernels.requires_grad else None
        for lo, hi in blocks:
            gb = g[lo:hi]
            if gw is not None:
                gw += np.tensordot(gb, columns(lo, hi), axes=([0, 2], [0, 2]))
            if gx is not None:
                gcols = (wflat.T @ gb).reshape(hi - lo, in_ch, klen, out_t)
                for k in range(klen):
                    gx[lo:hi, :, k : k + span : stride] += gcols[:, :, k]
        return gx, None if gw is None else gw.reshape(wd.shape)

    return _record(out, (x, kernels), vjp)


def _conv1d_fft(x, kernels, out_t):
    # circular correlation of length n >= time never wraps for the kept lags
    xd, wd = x.data, kernels.data
    time, klen = xd.shape[2], wd.shape[2]
    n = scipy.fft.next_fast_len(time, real=True)
    xf = scipy.fft.rfft(xd, n, axis=-1)
    wf = scipy.fft.rfft(wd, n, axis=-1)
    out = scipy.fft.irfft(np.einsum("bif,oif->bof", xf, wf.conj()), n, axis=-1)[..., :out_t]

    def vjp(g):
        gf = scipy.fft.rfft(g, n, axis=-1)
        gx = gw = None
        if x.requires_grad:
            gx = scipy.fft.irfft(np.einsum("bof,oif->bif", gf, wf), n, axis=-1)[..., :time]
        if kernels.requires_grad:
            gw = scipy.fft.irfft(np.einsum("bif,bof->oif", xf, gf.conj()), n, axis=-1)[..., :klen]
        return gx, gw

    return _record(np.ascontiguousarray(out, dtype=xd.dtype), (x, kernels), vjp)


def max_pool1d(x, size):
    """Non-overlapping max pooling over the last axis; the remainder is dropped.

    Ties route the gradient to the first maximal element of each window.
    """
    xd = x.data
    n = xd.shape[-1] // size
    if n == 0:
        raise DimensionError(f"max_pool1d window {size} exceeds length {xd.shape[-1]}")
    cols = [xd[..., j : n * size : size] for j in range(size)]
    out = cols[0].copy()
    for c in cols[1:]:
        np.maximum(out, c, out=out)

    def vjp(g):
        gx = np.zeros_like(xd)
        free = np.ones(out.shape, dtype=bool)
        for j, c in enumerate(cols):
            hit = free & (c == out)
            gx[..., j : n * size : size] = g * hit
            free &= ~hit
        return (gx,)

    return _record(out, (x,), vjp)


def layer_norm(x, gain, offset, eps=1e-6):
    """Per-sample normalisation over every non-batch axis.

    ``gain`` and ``offset`` have shape ``x.shape[1:]``.  Population variance.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    if x.ndim < 2 or gain.shape != x.shape[1:] or offset.shape != x.shape[1:]:
        raise DimensionError(f"layer_norm gain/offset must have shape {x.shape[1:]}, got {gain.shape}, {offset.shape}")
    xd = x.data
    axes = tuple(range(1, xd.ndim))
    mu = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = xd - mu.astype(xd.dtype)
    var = (xc.astype(np.float64) ** 2).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + offset.data

    def vjp(g):
        gh = g * gd
        mean_gh = gh.mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
        mean_ghx = (gh * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
        gx = inv * (gh - mean_gh - xhat * mean_ghx)
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gain, offset), vjp)


class BatchNormState:
    """Running mean/variance for one batch-norm layer (not learnable)."""

    def __init__(self, features, momentum=0.05, eps=1e-5):
        self.mean = np.zeros(features, dtype=get_dtype())
        self.var = np.ones(features, dtype=get_dtype())
        self.momentum = momentum
        self.eps = eps

    def copy(self):
        new = BatchNormState(len(self.mean), self.momentum, self.eps)
        new.mean, new.var = self.mean.copy(), self.var.copy()
        return new


def batch_norm(x, gain, offset, state, mode="train"):
    """Batch normalisation over axis 0 of a [batch, features] tensor.

    In train mode the batch statistics normalise the input and are folded
    into ``state`` as ``running <- (1 - momentum) * running + momentum * stat``.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or offset.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm expects [batch, F] input with [F] gain/offset, got {x.shape}, {gain.shape}")
    xd, gd = x.data, gain.data
    eps = state.eps
    if mode == "eval":
        inv = (1.0 / np.sqrt(state.var.astype(np.float64) + eps)).astype(xd.dtype)
        scale = gd * inv
        xhat = (xd - state.mean) * inv
        out = xhat * gd + offset.data

        def vjp_eval(g):
            return g * scale, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _record(out, (x, gain, offset), vjp_eval)
    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if xd.shape[0] < 2:
        raise DegenerateBatchError("batch_norm in train mode needs at least 2 samples")
    mu = xd.mean(axis=0, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=0, dtype=np.float64)
    m = state.momentum
    state.mean = ((1 - m) * state.mean + m * mu).astype(state.mean.dtype)
    state.var = ((1 - m) * state.var + m * var).astype(state.var.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)) * inv
    out = xhat * gd + offset.data

    def vjp(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gain, offset), vjp)


# ---------------------------------------------------------------------------
# Band-pass sinc taps
# ---------------------------------------------------------------------------
def hamming(klen):
    n = np.arange(klen)
    if klen == 1:
        return np.ones(1)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (klen - 1))


def sinc_bandpass(low, high, klen):
    """Windowed band-pass taps for cutoffs ``low <= high`` in cycles/sample.

    Returns [n_filters, klen].  Taps are computed for the right half and
    mirrored, so they are exactly symmetric about the centre.
    """
    low, high = as_tensor(low), as_tensor(high)
    if klen % 2 != 1:
        raise DimensionError(f"sinc kernel length must be odd, got {klen}")
    if low.shape != high.shape or low.ndim != 1:
        raise DimensionError(f"cutoff vectors must be 1-D and equal, got {low.shape}, {high.shape}")
    half = (klen - 1) // 2
    m = np.arange(half + 1, dtype=np.float64)
    win = hamming(klen)[half:]
    f1 = low.data.astype(np.float64)[:, None]
    f2 = high.data.astype(np.float64)[:, None]
    right = np.empty((len(f1), half + 1))
    mm = m[1:]
    right[:, 0] = 2 * (f2[:, 0] - f1[:, 0])
    right[:, 1:] = (np.sin(2 * np.pi * f2 * mm) - np.sin(2 * np.pi * f1 * mm)) / (np.pi * mm)
    right *= win

    def mirror(r):
        return np.concatenate([r[:, :0:-1], r], axis=1)

    out = mirror(right).astype(low.data.dtype)

    def vjp(g):
        # d/df [sin(2 pi f m) / (pi m)] = 2 cos(2 pi f m), and 2 at m = 0
        g64 = g.astype(np.float64)
        dhigh = mirror(2 * np.cos(2 * np.pi * f2 * m) * win)
        dlow = mirror(2 * np.cos(2 * np.pi * f1 * m) * win)
        dt = low.data.dtype
        return -(g64 * dlow).sum(axis=1).astype(dt), (g64 * dhigh).sum(axis=1).astype(dt)

    return _record(out, (low, high), vjp)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------
def relative_error(a, b, floor=1e-12):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numerical_gradient(fn, tensor, h):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
    return grad.reshape(tensor.shape)


def gradcheck(fn, tensors, h=None):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps nothing to a scalar tensor and reads ``tensors`` by closure.
    """
    if h is None:
        h = 1e-3 if get_dtype() == np.float32 else 1e-6
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numerical_gradient(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst



@dataclass
class GradReport:
    error: float  # worst per-tensor relative error over smooth coordinates
    checked: int
    kinks: int  # coordinates whose one-sided slopes disagree
    kink_error: float  # worst gap between the analytic value and the closer one-sided slope


def check_gradients(fn, tensors, analytic=None, h=None, max_coords=None, rng=None, kink_rtol=0.01):
    """Finite-difference audit that copes with piecewise-linear ops.

    Coordinates are perturbed one at a time (a random subset of at most
    ``max_coords`` per tensor when given).  Where the forward and backward
    one-sided slopes disagree by more than ``kink_rtol`` the perturbation
    straddles a kink (abs, max-pool, leaky ReLU); there the analytic value
    must match one of the two slopes instead of their average.

    ``analytic`` defaults to the tape gradient of ``fn()``; pass arrays to
    audit gradients computed elsewhere, e.g. at a lower precision.
    """
    if h is None:
        h = 1e-3 if get_dtype() == np.float32 else 1e-6
    if analytic is None:
        for t in tensors:
            t.grad = None
        backward(fn())
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]
    rng = np.random.default_rng(rng)
    worst, checked, kinks, kink_err = 0.0, 0, 0, 0.0
    with no_grad():
        f0 = float(fn().data)
        # slopes below this are indistinguishable from rounding in fn itself
        floor = 1e3 * np.finfo(fn().data.dtype).eps * max(abs(f0), 1.0) / h
        for t, a in zip(tensors, analytic):
            flat, a = t.data.reshape(-1), np.asarray(a, np.float64).reshape(-1)
            # slopes are judged against the tensor's typical gradient, so a
            # coordinate whose own gradient is near zero is not over-weighted
            rms = max(np.linalg.norm(a) / np.sqrt(max(a.size, 1)), floor)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
            smooth_a, smooth_n = [], []
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                fwd, bwd = (up - f0) / h, (f0 - down) / h
                if abs(fwd - bwd) > kink_rtol * max(abs(fwd), abs(bwd), rms) + floor:
                    kinks += 1
                    near = fwd if abs(a[i] - fwd) <= abs(a[i] - bwd) else bwd
                    kink_err = max(kink_err, abs(a[i] - near) / max(abs(a[i]), abs(near), rms))
                else:
                    smooth_a.append(a[i])
                    smooth_n.append((up - down) / (2 * h))
            checked += len(idx)
            if smooth_a:
                worst = max(worst, relative_error(smooth_a, smooth_n, rms * np.sqrt(len(smooth_a))))
    return GradReport(worst, checked, kinks, kink_err)
