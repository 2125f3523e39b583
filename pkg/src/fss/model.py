"""The few-shot spike-sorting network and its size-adaptive hyperparameters."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episodes import EpisodeBatch, encode_episode, stack_episodes
from .optim import ParameterSet
from .tensor import (
    BatchNormStats,
    RngStream,
    Tensor,
    batch_norm,
    concat,
    conv1d,
    dropout,
    linear,
    no_grad,
    relu,
    scaled_dot_product_attention,
)

CHECKPOINT_VERSION = "fss-v1"


# ---------------------------------------------------------------------------
# adaptive hyperparameters
# ---------------------------------------------------------------------------


def _p_std(n_d, n_min, n_max):
    if n_max <= n_min:
        raise ValueError(f"need n_max > n_min, got n_min={n_min}, n_max={n_max}")
    n_d = min(max(n_d, n_min), n_max)
    return (n_d - n_min) / (n_max - n_min)


def compute_kernel_count(n_d, n_min, n_max, f_min=8, f_max=64):
    """Kernel count interpolated on pool size, snapped to the nearest power of two.

    Distance is absolute and ties go to the larger power.
    """
    f_linear = f_min + _p_std(n_d, n_min, n_max) * (f_max - f_min)
    lo = 2 ** math.floor(math.log2(f_linear))
    hi = lo * 2
    f = hi if (hi - f_linear) <= (f_linear - lo) else lo
    return int(min(max(f, f_min), f_max))


def compute_dropout_rate(n_d, n_min, n_max, r_max=0.5, r_min=0.1):
    """Dropout falls linearly from ``r_max`` to ``r_min``; truncated to 2 decimals."""
    rate = r_max - _p_std(n_d, n_min, n_max) * (r_max - r_min)
    # the 1e-9 nudge keeps e.g. 0.0999999... from truncating to 0.09
    return round(math.floor(rate * 100 + 1e-9) / 100, 2)


def compute_rdc_depth(support, query):
    """Residual dilated blocks per temporal-conv module: log2(S+Q) rounded half up."""
    if support + query < 2:
        raise ValueError("support + query must be >= 2")
    return int(math.floor(math.log2(support + query) + 0.5))


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


@dataclass
class ModelConfig:
    f: int = 64
    dropout_rate: float = 0.1
    Z: int = 2
    dv_schedule: tuple = (32, 64, 128, 256)
    embed_dim: int = 128
    fc1_dim: int = 256
    ways: int = 2
    shots: int = 2
    queries: int = 1
    kernel_size: int = 3
    window_len: int = 66
    f_min: int = 8
    f_max: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        self.dv_schedule = tuple(int(v) for v in self.dv_schedule)
        if not _is_pow2(self.f) or not self.f_min <= self.f <= self.f_max:
            raise ValueError(f"f={self.f} must be a power of two in [{self.f_min}, {self.f_max}]")
        if not 0.1 <= self.dropout_rate <= 0.5:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0.1, 0.5]")
        if self.Z < 1:
            raise ValueError("Z must be >= 1")
        if len(self.dv_schedule) != 4:
            raise ValueError("dv_schedule must list 4 attention widths")
        if min(self.ways, self.shots, self.queries) < 1:
            raise ValueError("ways, shots and queries must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_pool(cls, n_d, n_min, n_max, ways=2, shots=2, queries=1, **kw):
        """Config whose f, dropout and depth adapt to a training pool of ``n_d`` windows."""
        f_min = kw.get("f_min", 8)
        f_max = kw.get("f_max", 64)
        return cls(
            f=compute_kernel_count(n_d, n_min, n_max, f_min, f_max),
            dropout_rate=compute_dropout_rate(n_d, n_min, n_max),
            Z=compute_rdc_depth(ways * shots, queries),
            ways=ways,
            shots=shots,
            queries=queries,
            **kw,
        )

    @property
    def seq_len(self):
        return self.ways * self.shots + self.queries

    def width_chain(self):
        """Feature width after the label concat and after every RA / TC block."""
        w = self.embed_dim + 1
        chain = [("label", w)]
        for i, dv in enumerate(self.dv_schedule, start=1):
            w += dv
            chain.append((f"ra{i}", w))
            if i < len(self.dv_schedule):
                w += self.f
                chain.append((f"tc{i}", w))
        return chain

    @property
    def head_width(self):
        return self.width_chain()[-1][1]

    def to_dict(self):
        d = asdict(self)
        d["dv_schedule"] = list(self.dv_schedule)
        return d


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ResidualAttention:
    """Self-attention across the episode whose output is appended to its input."""

    def __init__(self, params, prefix, d_in, d_v, rng, dtype):
        self.d_in, self.d_v, self.d_k = d_in, d_v, 2 * d_v
        self.w_q = params.add(f"{prefix}.w_q", _uniform(rng, (d_in, self.d_k), d_in, dtype))
        self.w_k = params.add(f"{prefix}.w_k", _uniform(rng, (d_in, self.d_k), d_in, dtype))
        self.w_v = params.add(f"{prefix}.w_v", _uniform(rng, (d_in, d_v), d_in, dtype))

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"RA block expects width {self.d_in}, got {x.shape[-1]}")
        out, weights = scaled_dot_product_attention(x @ self.w_q, x @ self.w_k, x @ self.w_v)
        return concat([x, out], axis=-1), weights


class ResidualDilatedConv:
    """Two dilated convolutions over the sequence axis plus an additive skip."""

    def __init__(self, params, prefix, c_in, f, dilation, k, rng, dtype):
        self.dilation = dilation
        self.w1 = params.add(f"{prefix}.conv1.weight", _uniform(rng, (f, c_in, k), c_in * k, dtype))
        self.b1 = params.add(f"{prefix}.conv1.bias", _uniform(rng, (f,), c_in * k, dtype))
        self.w2 = params.add(f"{prefix}.conv2.weight", _uniform(rng, (f, f, k), f * k, dtype))
        self.b2 = params.add(f"{prefix}.conv2.bias", _uniform(rng, (f,), f * k, dtype))
        self.proj_w = self.proj_b = None
        if c_in != f:
            self.proj_w = params.add(f"{prefix}.proj.weight", _uniform(rng, (f, c_in, 1), c_in, dtype))
            self.proj_b = params.add(f"{prefix}.proj.bias", _uniform(rng, (f,), c_in, dtype))

    def __call__(self, x):
        d = self.dilation
        h = relu(conv1d(x, self.w1, self.b1, padding=d, dilation=d))
        h = relu(conv1d(h, self.w2, self.b2, padding=d, dilation=d))
        skip = x if self.proj_w is None else conv1d(x, self.proj_w, self.proj_b)
        return h + skip


class TemporalConv:
    """Stack of Z residual dilated convs (dilation 1, 2, 4, ...) appended to its input."""

    def __init__(self, params, prefix, d_in, f, z, k, rng, dtype):
        self.d_in, self.f = d_in, f
        self.blocks = [
            ResidualDilatedConv(params, f"{prefix}.rdc{j + 1}", d_in if j == 0 else f, f, 2**j, k, rng, dtype)
            for j in range(z)
        ]

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"TC module expects width {self.d_in}, got {x.shape[-1]}")
        h = x.swapaxes(-1, -2)
        for block in self.blocks:
            h = block(h)
        return concat([x, h.swapaxes(-1, -2)], axis=-1)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class FssModel:
    def __init__(self, config, seed=0):
        self.config = cfg = config
        self.dtype = np.dtype(cfg.dtype)
        self.params = ParameterSet()
        rng = RngStream(seed)
        f, W, k, dt = cfg.f, cfg.window_len, cfg.kernel_size, self.dtype
        P = self.params

        self.conv_w = P.add("embedding.conv.weight", _uniform(rng, (f, 1, k), k, dt))
        self.conv_b = P.add("embedding.conv.bias", _uniform(rng, (f,), k, dt))
        self.bn_gamma = P.add("embedding.bn.gamma", np.ones(f, dtype=dt))
        self.bn_beta = P.add("embedding.bn.beta", np.zeros(f, dtype=dt))
        self.bn_stats = BatchNormStats.fresh(f, dt)
        self.att_q = P.add("embedding.attn.w_q", _uniform(rng, (f, f), f, dt))
        self.att_k = P.add("embedding.attn.w_k", _uniform(rng, (f, f), f, dt))
        self.att_v = P.add("embedding.attn.w_v", _uniform(rng, (f, f), f, dt))
        self.fc1_w = P.add("embedding.fc1.weight", _uniform(rng, (f * W, cfg.fc1_dim), f * W, dt))
        self.fc1_b = P.add("embedding.fc1.bias", _uniform(rng, (cfg.fc1_dim,), f * W, dt))
        self.fc2_w = P.add("embedding.fc2.weight", _uniform(rng, (cfg.fc1_dim, cfg.embed_dim), cfg.fc1_dim, dt))
        self.fc2_b = P.add("embedding.fc2.bias", _uniform(rng, (cfg.embed_dim,), cfg.fc1_dim, dt))

        self.ra_blocks, self.tc_modules = [], []
        width = cfg.embed_dim + 1
        n_ra = len(cfg.dv_schedule)
        for i, dv in enumerate(cfg.dv_schedule, start=1):
            self.ra_blocks.append(ResidualAttention(P, f"ra{i}", width, dv, rng, dt))
            width += dv
            if i < n_ra:
                self.tc_modules.append(TemporalConv(P, f"tc{i}", width, f, cfg.Z, k, rng, dt))
                width += f
        self.fc3_w = P.add("fc3.weight", _uniform(rng, (width, cfg.ways), width, dt))
        self.fc3_b = P.add("fc3.bias", _uniform(rng, (cfg.ways,), width, dt))

    def count_parameters(self):
        return self.params.count()

    # -- forward -----------------------------------------------------------
    def embed(self, windows, training=False, rng=None):
        """Per-spike 128-d features for ``windows`` shaped ``(..., 66)``.

        Returns ``(features, attention)`` with attention ``(..., 66, 66)``.
        """
        cfg = self.config
        arr = np.asarray(windows.data if isinstance(windows, Tensor) else windows, dtype=self.dtype)
        if arr.shape[-1] != cfg.window_len:
            raise ValueError(f"windows must have length {cfg.window_len}, got {arr.shape[-1]}")
        lead = arr.shape[:-1]
        x = Tensor(arr.reshape(-1, 1, cfg.window_len))
        h = conv1d(x, self.conv_w, self.conv_b, padding=cfg.kernel_size // 2)
        h = relu(batch_norm(h, self.bn_gamma, self.bn_beta, self.bn_stats, training))
        h = h.swapaxes(1, 2)  # (n, time, f)
        h, att = scaled_dot_product_attention(h @ self.att_q, h @ self.att_k, h @ self.att_v)
        h = h.reshape(h.shape[0], -1)
        h = relu(linear(h, self.fc1_w, self.fc1_b))
        h = dropout(h, cfg.dropout_rate, training, rng)
        h = linear(h, self.fc2_w, self.fc2_b)
        return h.reshape(*lead, cfg.embed_dim), att.reshape(*lead, cfg.window_len, cfg.window_len)

    def forward(self, batch, training=False, rng=None, keep_attention=False):
        """Query logits ``(B, q, N)`` for an EpisodeBatch (or a single Episode)."""
        cfg = self.config
        if not isinstance(batch, EpisodeBatch):
            batch = stack_episodes([batch])
        if batch.windows.shape[1] != cfg.seq_len or batch.queries != cfg.queries:
            raise ValueError(
                f"episode has {batch.windows.shape[1]} spikes / {batch.queries} queries; "
                f"model expects {cfg.seq_len} / {cfg.queries}"
            )
        feats, emb_att = self.embed(batch.windows, training, rng)
        h = encode_episode(batch.label_column, feats)
        maps = {"embedding": emb_att.data} if keep_attention else None
        for i, ra in enumerate(self.ra_blocks):
            h, w = ra(h)
            if keep_attention:
                maps[f"ra{i + 1}"] = w.data
            if i < len(self.tc_modules):
                h = self.tc_modules[i](h)
        h = h[:, cfg.seq_len - cfg.queries :, :]
        logits = linear(h, self.fc3_w, self.fc3_b)
        return (logits, maps) if keep_attention else logits

    __call__ = forward

    # -- checkpoints -------------------------------------------------------
    def buffers(self):
        return {"embedding.bn.running_mean": self.bn_stats.mean, "embedding.bn.running_var": self.bn_stats.var}

    def save(self, path, extra=None):
        """JSON manifest at ``path`` plus a little-endian float32 blob beside it."""
        path = Path(path)
        blob_path = path.with_name(path.name + ".bin")
        bufs = self.buffers()
        manifest = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": {n: list(p.shape) for n, p in self.params.items()},
            "buffers": {n: list(bufs[n].shape) for n in sorted(bufs)},
            "blob": blob_path.name,
            "blob_dtype": "<f4",
        }
        if extra:
            manifest["extra"] = extra
        arrays = [p.data for _, p in self.params.items()] + [bufs[n] for n in sorted(bufs)]
        flat = np.concatenate([a.ravel() for a in arrays]).astype("<f4")
        blob_path.write_bytes(flat.tobytes())
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, dtype=None):
        path = Path(path)
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        cfg = dict(manifest["config"])
        if dtype is not None:
            cfg["dtype"] = dtype
        model = cls(ModelConfig(**cfg))
        flat = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
        bufs = model.buffers()
        specs = [(n, s, model.params[n].data) for n, s in manifest["params"].items()]
        specs += [(n, s, bufs[n]) for n, s in manifest["buffers"].items()]
        expected = sum(int(np.prod(s)) for _, s, _ in specs)
        if expected != flat.size or set(manifest["params"]) != set(model.params.names()):
            raise ValueError("checkpoint blob does not match its manifest")
        offset = 0
        for name, shape, target in sorted(specs[: len(manifest["params"])]) + sorted(
            specs[len(manifest["params"]) :]
        ):
            n = int(np.prod(shape))
            if tuple(shape) != target.shape:
                raise ValueError(f"{name}: checkpoint shape {shape} != model {target.shape}")
            target[...] = flat[offset : offset + n].reshape(shape)
            offset += n
        return model


def count_parameters(model):
    return model.count_parameters()


def model_forward(model, episode, training=False, rng=None):
    """Logits ``q x N`` for one episode."""
    return model.forward(stack_episodes([episode]), training, rng)[0]


def attention_maps(model, episode):
    """Inference-mode attention: ``embedding`` (L, 66, 66) and ``ra1..ra4`` (L, L)."""
    with no_grad():
        _, maps = model.forward(stack_episodes([episode]), training=False, keep_attention=True)
    return {k: v[0] for k, v in maps.items()}
