"""Named parameter storage and the Adam update."""
from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor


class ParameterSet:
    """Trainable tensors keyed by dotted path, iterated in sorted-name order.

    Each parameter carries its own Adam state (first moment, second moment and
    step count).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def values(self):
        return [self._params[n] for n in self.names()]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def clear_grad(self):
        for p in self._params.values():
            p.grad = None

    def count(self):
        return int(sum(p.data.size for p in self._params.values()))


def clip_grad_norm(params, max_norm):
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values())))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad *= scale
    return total


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam update over ``params``; gradients are cleared after.

    ``weight_decay`` is decoupled (applied to the weights, not the gradient).
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, p in params.items():
        g = p.grad
        t = params.steps[name] + 1
        params.steps[name] = t
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        with np.errstate(all="ignore"):
            if weight_decay:
                p.data *= 1.0 - lr * weight_decay
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(p.data).all():
            raise NumericError(f"adam_step: parameter {name!r} became non-finite at step {t}")
    params.clear_grad()
