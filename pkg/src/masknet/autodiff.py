"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the operators the mask-Net graph needs are provided. There is no
general broadcasting: binary operators require identical shapes.

Every operator checks its forward output for NaN/Inf and raises
:class:`NonFiniteError` instead of letting a bad value propagate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NonFiniteError,
    UninitializedStatisticsError,
    UnreliableOracleError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """A float array that may take part in a differentiation graph.

    ``grad`` has the same shape as ``data`` once :func:`backward` has
    reached this tensor. Leaf tensors accumulate gradients across calls
    (clear them with :meth:`zero_grad`); intermediate tensors are
    overwritten.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def attach(out, parents, backward_fn, op, check_finite=True):
    """Wrap ``out`` as the result of a differentiable op.

    ``backward_fn(g)`` receives the upstream gradient and returns one
    gradient (or None) per parent, in order.
    """
    if check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: forward produced non-finite values")
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    t.op = op
    return t


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so parents are visited in construction order
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- operators


def linear(x, W, b=None):
    """``x @ W.T + b`` for x [B, Cin], W [Cout, Cin], b [Cout]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with W {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    xd, Wd = x.data, W.data

    def _bw(g):
        grads = [g @ Wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, W) if b is None else (x, W, b)
    return attach(out, parents, _bw, "linear")


def conv1d_output_length(T, K, stride, padding):
    return (T + 2 * padding - K) // stride + 1


def conv1d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of x [B, Cin, T] with kernel [Cout, Cin, K].

    No kernel flip. Output length is ``floor((T + 2*padding - K)/stride) + 1``.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 3 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv1d: x {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv1d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    B, Cin, T = x.shape
    Cout, _, K = kernel.shape
    T_out = conv1d_output_length(T, K, stride, padding)
    if K < 1 or T_out < 1:
        raise DimensionError(
            f"conv1d: output length {T_out} < 1 (T={T}, K={K}, stride={stride}, padding={padding})"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # cols[b, c, t, k] = xp[b, c, t*stride + k]
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, : (T_out - 1) * stride + 1 : stride, :]
    cols2 = cols.transpose(0, 2, 1, 3).reshape(B, T_out, Cin * K)
    w2 = kernel.data.reshape(Cout, Cin * K)
    out = (cols2 @ w2.T).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gt = g.transpose(0, 2, 1)  # B, T_out, Cout
        gw = np.tensordot(gt, cols2, axes=([0, 1], [0, 1])).reshape(kernel.shape)
        gcols = (gt @ w2).reshape(B, T_out, Cin, K)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        span = (T_out - 1) * stride + 1
        for k in range(K):
            gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + T] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return attach(out, parents, _bw, "conv1d")


@dataclass
class BatchNormState:
    """Running per-channel moments, updated by exponential moving average."""

    channels: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    num_batches: int = 0

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)


def batchnorm1d(x, gamma, beta, state, training):
    """Per-channel normalization of x [B, C, T] over batch and time."""
    if x.data.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm1d: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    B, C, T = x.shape
    xd = x.data
    if training:
        n = B * T
        if n < 2:
            raise ContractError(f"batchnorm1d: training needs B*T >= 2, got {n}")
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        m = state.momentum
        dt = state.running_mean.dtype
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(dt)
        state.running_var = (m * state.running_var + (1 - m) * var * (n / (n - 1))).astype(dt)
        state.num_batches += 1
    else:
        if state.num_batches == 0:
            raise UninitializedStatisticsError("batchnorm1d: eval mode before any training step")
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
    gd = gamma.data

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gd[None, :, None]
        if training:
            n = B * T
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            gx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return attach(out, (x, gamma, beta), _bw, "batchnorm1d")


def relu(x):
    mask = x.data > 0
    return attach(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    """Logistic squash, clipped so the result is strictly inside (0, 1).

    In float32 ``1/(1+exp(-40))`` rounds to exactly 1.0; the clip keeps
    the open-interval contract at the cost of a flat gradient out there.
    """
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    fi = np.finfo(xd.dtype)
    s = np.clip(s, fi.tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)))
    return attach(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def pointwise_activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def mean_over_time(x):
    """[B, C, T] -> [B, C], averaging the last axis."""
    if x.data.ndim != 3 or x.shape[2] < 1:
        raise DimensionError(f"mean_over_time: need [B, C, T>=1], got {x.shape}")
    T = x.shape[2]
    shape = x.shape

    def _bw(g):
        return (np.broadcast_to((g / T)[:, :, None], shape).copy(),)

    return attach(x.data.mean(axis=2), (x,), _bw, "mean_over_time")


def tile_over_time(x, T):
    """[B, C] -> [B, C, T] by exact replication along time."""
    if x.data.ndim != 2:
        raise DimensionError(f"tile_over_time: need [B, C], got {x.shape}")
    if T < 1:
        raise DimensionError(f"tile_over_time: T must be >= 1, got {T}")
    out = np.repeat(x.data[:, :, None], T, axis=2)
    return attach(out, (x,), lambda g: (g.sum(axis=2),), "tile_over_time")


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return attach(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add(a, b):
    _same_shape("add", a, b)
    return attach(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x, c):
    c = x.data.dtype.type(c)
    return attach(x.data * c, (x,), lambda g: (g * c,), "scale")


def total(x):
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape
    return attach(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum"
    )


def mean(x):
    n = x.data.size
    shape = x.shape
    return attach(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=x.dtype),),
        "mean",
    )


def transpose(x, axes):
    inv = np.argsort(axes)
    return attach(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def pick(x, index):
    """x[i, index[i]] for a 2-D x, giving a 1-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: x {x.shape} with index {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def _bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, index] = g
        return (gx,)

    return attach(x.data[rows, index], (x,), _bw, "pick")


def log_softmax(x):
    """Stable log-softmax over the last axis."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax: need a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return attach(out, (x,), _bw, "log_softmax")


def grad_reverse(x, lam):
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ContractError(f"grad_reverse: lambda must be >= 0, got {lam}")
    factor = x.data.dtype.type(-lam)
    return attach(x.data, (x,), lambda g: (g * factor,), "grad_reverse")


def stop_gradient(x):
    """Identity forward (same array); no gradient flows back to ``x``."""
    t = Tensor(x.data)
    t.op = "stop_gradient"
    return t


# ------------------------------------------------------------ gradient check


def _as_float64(t):
    return Tensor(np.array(t.data, dtype=np.float64), requires_grad=True)


def gradcheck_tensors(loss_fn, tensors, epsilon=1e-6):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``tensors`` are perturbed in place one coordinate at a time. Returns the
    max over all coordinates of ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for t in tensors:
        t.zero_grad()
    base = loss_fn()
    again = loss_fn()
    if base.data.size != 1:
        raise ContractError(f"gradcheck: loss must be scalar, got shape {base.shape}")
    if not np.array_equal(base.data, again.data):
        raise UnreliableOracleError("gradcheck: two evaluations at the same point differ")
    for t in tensors:
        t.zero_grad()
    backward(base)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn().data)
            flat[i] = orig - epsilon
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * epsilon)
        a = analytic.reshape(-1).astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def finite_diff_gradcheck(f, x, epsilon=1e-6):
    """Max relative error between autodiff and central differences for ``f(x)``.

    The check runs in float64 whatever the dtype of ``x``: a float32
    central difference cannot resolve 1e-4 relative error.
    """
    x64 = _as_float64(x)
    return gradcheck_tensors(lambda: f(x64), [x64], epsilon)
