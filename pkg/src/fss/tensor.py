"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array and, when it takes part in a computation
that requires gradients, remembers its parents together with a closure that
pushes the output gradient back to them.  ``backward`` walks the recorded
graph in reverse topological order.

Only the primitives the spike-sorting network needs are provided: affine
maps, 1-D convolution, batch normalization, attention, ReLU, dropout,
concatenation and a fused softmax cross-entropy.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "RngStream",
    "BatchNormStats",
    "no_grad",
    "tensor",
    "concat",
    "conv1d",
    "batch_norm",
    "softmax",
    "scaled_dot_product_attention",
    "linear",
    "relu",
    "dropout",
    "softmax_cross_entropy",
    "backward",
]


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def _flush_subnormal(g):
    """Zero subnormal entries in place; arithmetic on them is an order of magnitude slower."""
    if g.dtype.kind == "f" and g.size > 1:
        np.putmask(g, np.abs(g) < np.finfo(g.dtype).tiny, 0)
    return g


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    # -- graph helpers ----------------------------------------------------
    @staticmethod
    def _result(data, parents, backward_fn, what):
        _check_finite(data, what)
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def _bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), _bw, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self

        def _bw(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), _bw, "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), _bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions and reshaping ----------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._result(
            np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _bw, "sum"
        )

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def _bw(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(a.data.reshape(shape), (a,), _bw, "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        a = self

        def _bw(g):
            a._accumulate(g.transpose(inverse))

        return Tensor._result(a.data.transpose(axes), (a,), _bw, "transpose")

    def swapaxes(self, i, j):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(axes)

    def __getitem__(self, idx):
        a = self

        def _bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._result(np.array(a.data[idx]), (a,), _bw, "getitem")

    def backward(self, params=None):
        backward(self, params)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad=False, dtype=np.float64, name=None):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    ``params`` (a mapping or ParameterSet) lets callers ask that parameters the
    graph never touched end up with an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    if loss._backward is None:
        loss._accumulate(np.ones_like(loss.data))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            # leaves received their gradient directly in .grad
            continue
        _flush_subnormal(g)
        # route parent gradients into the local map instead of .grad
        for p in node._parents:
            if p.requires_grad and p._backward is not None:
                p.grad = grads.get(id(p))
        node._backward(g)
        for p in node._parents:
            if p.requires_grad and p._backward is not None:
                if p.grad is not None:
                    grads[id(p)] = p.grad
                p.grad = None

    for node in order:
        if node._backward is None and node.grad is not None:
            _check_finite(node.grad, "backward")
            _flush_subnormal(node.grad)

    if params is not None:
        values = params.values() if hasattr(params, "values") else params
        for p in values:
            if p.grad is None:
                p.zero_grad()


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Seeded random source that counts how many values it has produced."""

    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def _count(self, size):
        self.counter += int(np.prod(size)) if size is not None else 1

    def spawn(self, key):
        """Independent child stream keyed by ``key`` (deterministic)."""
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def random(self, size=None):
        self._count(size)
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self._count(size)
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self._count(size)
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self._count(size)
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        self._count(size)
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        self._count(n)
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    # a stack times one matrix is a single 2-D GEMM, far faster than numpy's broadcast loop
    flat = b.ndim == 2 and a.ndim > 2

    def _bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return Tensor._result(out, (a, b), _bw, "matmul")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(data, tuple(tensors), _bw, "concat")


def relu(x):
    mask = x.data > 0

    def _bw(g):
        x._accumulate(g * mask)

    return Tensor._result(x.data * mask, (x,), _bw, "relu")


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(y, (x,), _bw, "softmax")


def linear(x, weight, bias=None):
    """Affine map along the trailing axis: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"linear: input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    if x.ndim == 1:
        out = matmul(x.reshape(1, -1), weight).reshape(weight.shape[1])
    else:
        out = matmul(x, weight)
    return out if bias is None else out + bias


def scaled_dot_product_attention(q, k, v):
    """softmax(q kᵀ / sqrt(d_k)) v over the second-to-last axis.

    Returns ``(output, weights)``; leading axes are treated as batch axes.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2] or q.shape[-2] < 1:
        raise ValueError(f"attention length mismatch: k {k.shape}, v {v.shape}")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(k.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def conv1d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlation over the last axis with zero padding.

    ``x`` is ``C_in x L`` or ``B x C_in x L``; ``weight`` is ``C_out x C_in x K``.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv1d needs stride >= 1, dilation >= 1, padding >= 0")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d shapes: input {x.shape}, kernels {weight.shape}")
    B, C_in, L = x.shape
    C_out, wc, K = weight.shape
    if wc != C_in or K < 1:
        raise ValueError(f"conv1d: kernels {weight.shape} do not fit {C_in} input channels")
    if bias is not None and bias.shape != (C_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({C_out},)")
    span = dilation * (K - 1) + 1
    L_out = (L + 2 * padding - span) // stride + 1
    if L + 2 * padding < span or L_out <= 0:
        raise ValueError(f"conv1d: output length {L_out} is not positive")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    stop = stride * (L_out - 1) + 1
    # im2col: rows are (batch, output position), columns are (channel, tap)
    cols = np.stack(
        [xp[:, :, k * dilation : k * dilation + stop : stride] for k in range(K)], axis=-1
    )  # (B, C_in, L_out, K)
    cols = cols.transpose(0, 2, 1, 3).reshape(B * L_out, C_in * K)
    wmat = weight.data.reshape(C_out, C_in * K)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, L_out, C_out).transpose(0, 2, 1))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L_out, C_out)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(C_out, C_in, K))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, L_out, C_in, K)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k * dilation : k * dilation + stop : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            x._accumulate(gxp[:, :, padding : padding + L] if padding else gxp)

    res = Tensor._result(out, parents, _bw, "conv1d")
    return res.reshape(C_out, L_out) if squeeze else res


@dataclass
class BatchNormStats:
    """Running per-channel mean and variance used at inference."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, running, training, eps=1e-5, momentum=0.1):
    """Per-channel normalization of a ``B x C x L`` tensor over batch and length."""
    if x.ndim != 3:
        raise ValueError(f"batch_norm expects B x C x L input, got {x.shape}")
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({C},)")
    n = B * L
    if training:
        if n < 2:
            raise ValueError("batch_norm in training mode needs B*L >= 2")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if running is not None:
            running.mean[...] = (1 - momentum) * running.mean + momentum * mean
            running.var[...] = (1 - momentum) * running.var + momentum * var * n / (n - 1)
    else:
        if running is None:
            raise ValueError("batch_norm at inference needs running statistics")
        mean, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def _bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                s1 = gxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (gxhat - s1 / n - xhat * s2 / n) * inv_std[None, :, None]
            else:
                gx = gxhat * inv_std[None, :, None]
            x._accumulate(gx)

    return Tensor._result(out, (x, gamma, beta), _bw, "batch_norm")


def softmax_cross_entropy(logits, target):
    """Mean of -log softmax(logits)[target] over all leading positions.

    ``logits`` is ``N`` with an int target, or ``... x N`` with an int array.
    """
    target = np.asarray(target)
    n_cls = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} != logits leading {logits.shape[:-1]}")
    if target.size and (target.min() < 0 or target.max() >= n_cls):
        raise ValueError(f"class index out of range for {n_cls} classes")
    z = logits.data.reshape(-1, n_cls)
    t = target.reshape(-1).astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    nll = logsum - shifted[rows, t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def _bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, t] -= 1.0
        logits._accumulate((g * p / len(t)).reshape(logits.shape))

    return Tensor._result(loss, (logits,), _bw, "softmax_cross_entropy")
