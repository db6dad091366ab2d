"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`DiffTensor` wraps an ndarray together with a gradient buffer
and a backward closure; calling :meth:`DiffTensor.backward` on a scalar
walks the graph in reverse topological order.  Only the operations the
group-convolution executors and the classifier need are provided.

Multiply-accumulate counts of the contraction ops (matmul and the two
convolutions) are recorded into any active :func:`count_macs` tally;
:func:`suspend_macs` masks arithmetic that is not part of a cost model,
such as kernel sampling.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_active_tallies: list["MacTally"] = []
_suspend_depth = 0


class MacTally:
    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0


def _record_macs(n: int) -> None:
    if _suspend_depth == 0 and _active_tallies:
        for t in _active_tallies:
            t.total += int(n)


@contextmanager
def count_macs():
    """Tally forward-pass multiply-accumulates of contraction ops."""
    t = MacTally()
    _active_tallies.append(t)
    try:
        yield t
    finally:
        _active_tallies.remove(t)


@contextmanager
def suspend_macs():
    """Mask MAC recording, e.g. while sampling kernels."""
    global _suspend_depth
    _suspend_depth += 1
    try:
        yield
    finally:
        _suspend_depth -= 1


_grad_enabled = True


@contextmanager
def no_grad():
    """Skip graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[DiffTensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, DiffTensor) or not np.isscalar(other):
            raise TypeError("division only by python scalars")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)


def _wrap(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x))


def constant(x, dtype=None) -> DiffTensor:
    arr = np.asarray(x, dtype=dtype)
    return DiffTensor(arr)


def parameter(x, dtype=None) -> DiffTensor:
    arr = np.array(x, dtype=dtype, copy=True)
    return DiffTensor(arr, requires_grad=True)


def _accum(t: DiffTensor, delta: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = delta.copy() if isinstance(delta, np.ndarray) else np.asarray(delta)
    else:
        t.grad = t.grad + delta


def _node(data: np.ndarray, parents: tuple, backward) -> DiffTensor:
    out = DiffTensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ValueError(f"matmul expects two 2d or two 3d operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data
    _record_macs(data.size * a.data.shape[-1])

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        _accum(a, g @ bt)
        _accum(b, at @ g)

    return _node(data, (a, b), backward)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a: DiffTensor, axes) -> DiffTensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(data, (a,), backward)


def stack(tensors: list[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for t, gi in zip(tensors, np.moveaxis(g, axis, 0)):
            _accum(t, gi)

    return _node(data, tuple(tensors), backward)


def index_axis0(a: DiffTensor, i: int) -> DiffTensor:
    """Select slice ``a[i]`` along the leading axis."""
    a = _wrap(a)
    data = a.data[i]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        _accum(a, buf)

    return _node(data, (a,), backward)


def sin(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    data = np.sin(a.data)

    def backward(g):
        _accum(a, g * np.cos(a.data))

    return _node(data, (a,), backward)


def relu(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def backward(g):
        _accum(a, g * mask)

    return _node(data, (a,), backward)


def leaky_relu(a: DiffTensor, slope: float = 0.01) -> DiffTensor:
    a = _wrap(a)
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data).astype(a.data.dtype)

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope).astype(a.data.dtype))

    return _node(data, (a,), backward)


def swish(a: DiffTensor) -> DiffTensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        _accum(a, g * (sig + a.data * sig * (1.0 - sig)))

    return _node(data, (a,), backward)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def reduce_sum(a: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gk, a.data.shape).astype(a.data.dtype))

    return _node(data, (a,), backward)


def reduce_mean(a: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axes, keepdims), 1.0 / count)


def reduce_max(a: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    """Max over ``axes``; the gradient routes to the first argmax entry."""
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.transpose(a.data, kept + axes)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def backward(g):
        gflat = g.reshape(lead)
        gm = np.zeros_like(flat)
        np.put_along_axis(gm, idx[..., None], gflat[..., None], axis=-1)
        gm = gm.reshape(moved.shape)
        _accum(a, np.transpose(gm, np.argsort(kept + axes)))

    return _node(out, (a,), backward)


def max_pool2d(a: DiffTensor, size: int = 2) -> DiffTensor:
    n, c, h, w = a.shape
    if h % size or w % size:
        raise ValueError(f"spatial dims {(h, w)} not divisible by pool size {size}")
    tiled = reshape(a, (n, c, h // size, size, w // size, size))
    return reduce_max(tiled, axes=(3, 5))


# -- convolution -------------------------------------------------------------

def _pad2d(x: np.ndarray, r: int, padding: str) -> np.ndarray:
    if r == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    if padding == "zero":
        return np.pad(x, width)
    if padding == "circular":
        return np.pad(x, width, mode="wrap")
    raise ValueError(f"unknown padding {padding!r}")


def _conv2d_data(x: np.ndarray, w: np.ndarray, padding: str) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2 or kh != kw or kh % 2 == 0:
        raise ValueError(f"bad conv shapes x={x.shape} w={w.shape}")
    r = kh // 2
    xp = _pad2d(x, r, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, ci * kh * kw)
    out = cols @ w.reshape(co, -1).T
    return out.reshape(n, h, wd, co).transpose(0, 3, 1, 2)


def conv2d(x: DiffTensor, w: DiffTensor, padding: str = "zero") -> DiffTensor:
    """Stride-1 same-size 2d correlation of (N, Ci, H, W) with (Co, Ci, k, k)."""
    x, w = _wrap(x), _wrap(w)
    data = _conv2d_data(x.data, w.data, padding)
    n, co, h, wd = data.shape
    ci, k = w.shape[1], w.shape[2]
    _record_macs(data.size * ci * k * k)

    def backward(g):
        wf = np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3)
        _accum(x, _conv2d_data(g, wf, padding))
        r = k // 2
        xp = _pad2d(x.data, r, padding)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, ci * k * k)
        gflat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, co)
        _accum(w, (cols.T @ gflat).T.reshape(w.data.shape))

    return _node(data, (x, w), backward)


def conv2d_grouped(x: DiffTensor, w: DiffTensor, padding: str = "zero") -> DiffTensor:
    """Grouped stride-1 conv: (N, G, Cg, H, W) with (G, Cg, k, k) -> (N, G, H, W)."""
    x, w = _wrap(x), _wrap(w)
    n, gs, cg, h, wd = x.shape
    gs2, cg2, kh, kw = w.shape
    if gs != gs2 or cg != cg2 or kh != kw or kh % 2 == 0:
        raise ValueError(f"bad grouped conv shapes x={x.shape} w={w.shape}")
    r = kh // 2
    xp = _pad2d(x.data, r, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(3, 4))
    cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(gs, n * h * wd, cg * kh * kw)
    out = cols @ w.data.reshape(gs, cg * kh * kw, 1)
    data = out.reshape(gs, n, h, wd).transpose(1, 0, 2, 3)
    _record_macs(data.size * cg * kh * kw)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(gs, n * h * wd, 1)
        _accum(w, (np.swapaxes(cols, 1, 2) @ gt).reshape(w.data.shape))
        gp = _pad2d(g, r, padding)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gcols = gwin.transpose(1, 0, 2, 3, 4, 5).reshape(gs, n * h * wd, kh * kw)
        wf = np.flip(w.data, axis=(2, 3)).reshape(gs, cg, kh * kw).transpose(0, 2, 1)
        gx = (gcols @ wf).reshape(gs, n, h, wd, cg).transpose(1, 0, 4, 2, 3)
        _accum(x, gx)

    return _node(data, (x, w), backward)


def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    return add(matmul(x, w), b)


class BatchNormState:
    """Running statistics container updated in place during training."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: DiffTensor,
    gamma: DiffTensor,
    beta: DiffTensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> DiffTensor:
    """Per-channel normalization; channel axis 1, statistics over all others."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    gm = gamma.data.reshape(bshape)
    bt = beta.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        state.mean[:] = (1 - momentum) * state.mean + momentum * mu.reshape(-1)
        state.var[:] = (1 - momentum) * state.var + momentum * var.reshape(-1)
    else:
        mu = state.mean.reshape(bshape).astype(x.data.dtype)
        var = state.var.reshape(bshape).astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gm * xhat + bt
    m = int(np.prod([x.shape[ax] for ax in axes]))

    def backward(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        gx_hat = g * gm
        if training:
            term = gx_hat - gx_hat.mean(axis=axes, keepdims=True) \
                - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True) / m
            _accum(x, inv * term)
        else:
            _accum(x, gx_hat * inv)

    return _node(data, (x, gamma, beta), backward)


def softmax_cross_entropy(logits: DiffTensor, labels: np.ndarray) -> DiffTensor:
    """Mean cross entropy of (N, K) logits against (N,) integer labels."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(z - lse)
    losses = lse[:, 0] - z[np.arange(n), labels]
    data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        _accum(logits, (float(g) / n) * d)

    return _node(data, (logits,), backward)


# -- optimizer and checking --------------------------------------------------

class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, DiffTensor],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update from the accumulated grads; decay enters the gradient."""
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def zero_grads(params: dict[str, DiffTensor]) -> None:
    for p in params.values():
        p.grad = None


def grad_check(
    fn,
    tensors: list[DiffTensor],
    eps: float = 1e-5,
    max_entries: int = 64,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``fn`` evaluates a scalar from the given tensors; their ``data`` is
    perturbed in place for the finite differences.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "tensor unused by fn"
        flat_idx = np.arange(t.size)
        if t.size > max_entries:
            flat_idx = rng.choice(t.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in flat_idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = fn().item()
            flat[i] = keep - eps
            dn = fn().item()
            flat[i] = keep
            fd = (up - dn) / (2 * eps)
            a = float(gflat[i])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst
