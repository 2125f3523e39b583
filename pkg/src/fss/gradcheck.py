"""Central finite-difference checks for the differentiable primitives and the model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import builtin_templates, generate_synthetic, normalize_dataset
from .episodes import sample_batch
from .model import FssModel, ModelConfig
from .tensor import RngStream, Tensor, backward

EPS = 1e-5
# gradients smaller than this are compared in absolute terms
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numerical_gradient(fn, arr, eps=EPS, index=None):
    """d fn() / d arr by central differences, perturbing ``arr`` in place.

    ``index`` restricts the estimate to a list of flat positions.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions)) if index is not None else np.zeros(flat.size)
    for j, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + eps
        hi = fn()
        flat[i] = old - eps
        lo = fn()
        flat[i] = old
        out[j if index is not None else i] = (hi - lo) / (2 * eps)
    return out if index is not None else out.reshape(arr.shape)


def check_function(name, build, inputs, tolerance=1e-4, eps=EPS):
    """Compare backward() against finite differences of ``sum(build(*inputs) * R)``.

    ``inputs`` are float64 arrays; ``R`` is a fixed random weighting so every
    output element contributes a distinct gradient.
    """
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(*tensors)
    weights = np.random.default_rng(len(name)).normal(size=out.shape)

    def scalar():
        with T.no_grad():
            return float((build(*[Tensor(t.data) for t in tensors]).data * weights).sum())

    loss = (out * Tensor(weights)).sum()
    backward(loss)
    worst = 0.0
    for t in tensors:
        num = numerical_gradient(scalar, t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return CheckResult(name, worst, tolerance)


# ---------------------------------------------------------------------------
# the primitive suite
# ---------------------------------------------------------------------------


def _op_cases(rng):
    """(name, build, inputs) triples with shapes drawn from ``rng``."""
    n = lambda *s: rng.normal(size=s)
    L = int(rng.integers(6, 12))
    c_in, c_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
    d = int(rng.integers(1, 3))
    s = int(rng.integers(1, 3))
    stats = T.BatchNormStats(n(c_in), 1 + rng.random(c_in))
    cases = [
        (
            "conv1d",
            lambda x, w, b: T.conv1d(x, w, b, stride=s, padding=d * (k - 1) // 2, dilation=d),
            [n(2, c_in, L), n(c_out, c_in, k), n(c_out)],
        ),
        ("batch_norm[train]", lambda x, g, b: T.batch_norm(x, g, b, None, True), [n(3, c_in, L), n(c_in), n(c_in)]),
        (
            "batch_norm[eval]",
            lambda x, g, b: T.batch_norm(x, g, b, stats, False),
            [n(3, c_in, L), n(c_in), n(c_in)],
        ),
        ("attention", lambda q, k_, v: T.scaled_dot_product_attention(q, k_, v)[0], [n(L, 4), n(L, 4), n(L, 3)]),
        ("linear", lambda x, w, b: T.linear(x, w, b), [n(2, L, 4), n(4, 3), n(3)]),
        ("relu", T.relu, [n(3, L) + 0.05 * np.sign(n(3, L))]),
        ("concat", lambda a, b: T.concat([a, b], axis=-1), [n(L, 2), n(L, 3)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [n(3, L)]),
        ("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, np.array([0, 2, 1])), [n(3, 4)]),
        ("matmul", lambda a, b: a @ b, [n(2, 3, 4), n(4, 5)]),
        ("transpose+getitem", lambda a: a.swapaxes(0, 1)[1:, :2].reshape(-1), [n(3, 4)]),
    ]
    seed = int(rng.integers(0, 2**31))
    cases.append(
        ("dropout", lambda x: T.dropout(x, 0.3, True, RngStream(seed)), [n(4, L)])
    )
    return cases


def tiny_model_config():
    return ModelConfig(f=8, dropout_rate=0.1, Z=2, dtype="float64")


def check_model(tolerance=1e-4, seed=0, coords=4, eps=EPS):
    """Per-parameter-tensor checks of the full network loss (training mode).

    Each tensor gets a random directional derivative plus the ``coords``
    entries with the largest analytic gradient.
    """
    cfg = tiny_model_config()
    model = FssModel(cfg, seed=seed)
    ds = normalize_dataset(generate_synthetic(builtin_templates(), 6, 0.1, seed))
    batch = sample_batch(ds, 2, cfg.ways, cfg.shots, cfg.queries, RngStream(seed))

    def loss_value():
        with T.no_grad():
            logits = model.forward(batch, True, RngStream(seed + 1))
            return float(T.softmax_cross_entropy(logits, batch.query_truth).data)

    logits = model.forward(batch, True, RngStream(seed + 1))
    backward(T.softmax_cross_entropy(logits, batch.query_truth), model.params)
    grads = {name: p.grad.copy() for name, p in model.params.items()}
    rng = np.random.default_rng(seed)
    results = []
    for name, p in model.params.items():
        g = grads[name]
        v = rng.normal(size=p.shape)
        v /= np.linalg.norm(v)
        p.data += eps * v
        hi = loss_value()
        p.data -= 2 * eps * v
        lo = loss_value()
        p.data += eps * v
        worst = relative_error([(g * v).sum()], [(hi - lo) / (2 * eps)])
        top = np.argsort(-np.abs(g).ravel())[:coords]
        num = numerical_gradient(loss_value, p.data, eps, index=list(top))
        worst = max(worst, relative_error(g.ravel()[top], num))
        results.append(CheckResult(f"model:{name}", worst, tolerance))
    return results


def run_suite(tolerance=1e-4, seeds=range(20), model=True):
    """All primitive checks over ``seeds`` plus the tiny-model sweep."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build, inputs in _op_cases(rng):
            results.append(check_function(f"{name}#{seed}", build, inputs, tolerance))
    if model:
        results.extend(check_model(tolerance))
    return results
