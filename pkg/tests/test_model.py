import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fss.episodes import sample_episode, stack_episodes
from fss.model import (
    FssModel,
    ModelConfig,
    ResidualAttention,
    TemporalConv,
    attention_maps,
    compute_dropout_rate,
    compute_kernel_count,
    compute_rdc_depth,
    count_parameters,
    model_forward,
)
from fss.optim import ParameterSet
from fss.tensor import RngStream, Tensor

PROPORTIONS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
EXPECTED_F = [8, 16, 16, 32, 32, 32, 32, 64, 64, 64]
EXPECTED_DROPOUT = [0.50, 0.45, 0.41, 0.36, 0.32, 0.27, 0.23, 0.18, 0.14, 0.10]
POOL = 630  # 70% of 300 windows x 3 classes


def pool_args(p, n_max=POOL):
    return round(p * n_max), round(0.1 * n_max), n_max


def nearest_pow2_oracle(x, lo=8, hi=64):
    cands = [2**e for e in range(int(math.log2(lo)), int(math.log2(hi)) + 1)]
    best = min(abs(c - x) for c in cands)
    return max(c for c in cands if abs(c - x) == best)


def tiny(f=8, **kw):
    return FssModel(ModelConfig(f=f, dtype="float64", **kw), seed=0)


# -- adaptive hyperparameters ----------------------------------------------------


def test_kernel_count_table():
    assert [compute_kernel_count(*pool_args(p)) for p in PROPORTIONS] == EXPECTED_F


def test_dropout_table():
    assert [compute_dropout_rate(*pool_args(p)) for p in PROPORTIONS] == EXPECTED_DROPOUT


def test_kernel_count_worked_points():
    # 0.7 -> f_linear 45.3 -> 32 ; 0.8 -> 51.6 -> 64
    n_d, n_min, n_max = pool_args(0.7, 1000)
    assert 8 + (n_d - n_min) / (n_max - n_min) * 56 == pytest.approx(45.33, abs=0.01)
    assert compute_kernel_count(n_d, n_min, n_max) == 32
    assert compute_kernel_count(*pool_args(0.8, 1000)) == 64


def test_dropout_truncates():
    assert compute_dropout_rate(*pool_args(0.4, 1000)) == 0.36


@settings(max_examples=200, deadline=None)
@given(n_min=st.integers(1, 500), span=st.integers(1, 5000), frac=st.floats(0, 1))
def test_kernel_count_matches_brute_force(n_min, span, frac):
    n_max = n_min + span
    n_d = n_min + int(frac * span)
    f_linear = 8 + (n_d - n_min) / span * 56
    assert compute_kernel_count(n_d, n_min, n_max) == nearest_pow2_oracle(f_linear)
    rate = compute_dropout_rate(n_d, n_min, n_max)
    assert 0.1 <= rate <= 0.5
    assert rate <= 0.5 - (n_d - n_min) / span * 0.4 + 1e-9


def test_pool_size_is_clamped():
    assert compute_kernel_count(1, 63, 630) == 8
    assert compute_kernel_count(10_000, 63, 630) == 64


def test_degenerate_pool_bounds():
    with pytest.raises(ValueError):
        compute_kernel_count(5, 10, 10)
    with pytest.raises(ValueError):
        compute_dropout_rate(5, 10, 3)


@pytest.mark.parametrize("s,q,z", [(4, 1, 2), (1, 1, 1), (15, 1, 4), (5, 1, 3), (2, 1, 2)])
def test_rdc_depth(s, q, z):
    assert compute_rdc_depth(s, q) == z


def test_rdc_depth_too_small():
    with pytest.raises(ValueError):
        compute_rdc_depth(1, 0)


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(f=12), dict(f=128), dict(dropout_rate=0.6), dict(Z=0), dict(dv_schedule=(32, 64)), dict(dtype="int8")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


@pytest.mark.parametrize("f", [8, 16, 32, 64, 128])
def test_width_chain(f):
    cfg = ModelConfig(f=f, f_max=128)
    widths = [w for _, w in cfg.width_chain()]
    assert widths == [129, 161, 161 + f, 225 + f, 225 + 2 * f, 353 + 2 * f, 353 + 3 * f, 609 + 3 * f]
    assert cfg.head_width == 609 + 3 * f


def test_head_width_at_128_and_64():
    assert ModelConfig(f=128, f_max=128).head_width == 993
    assert ModelConfig(f=64).head_width == 801


def test_from_pool():
    cfg = ModelConfig.from_pool(*pool_args(0.1))
    assert (cfg.f, cfg.dropout_rate, cfg.Z, cfg.seq_len) == (8, 0.5, 2, 5)


# -- blocks --------------------------------------------------------------------


def test_ra_block_width_and_residual(rng):
    block = ResidualAttention(ParameterSet(), "ra", 129, 32, RngStream(0), np.float64)
    x = Tensor(rng.normal(size=(5, 129)))
    out, w = block(x)
    assert out.shape == (5, 161)
    np.testing.assert_array_equal(out.data[:, :129], x.data)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_ra_block_single_position(rng):
    block = ResidualAttention(ParameterSet(), "ra", 6, 4, RngStream(0), np.float64)
    x = Tensor(rng.normal(size=(1, 6)))
    out, _ = block(x)
    np.testing.assert_allclose(out.data[0, 6:], x.data[0] @ block.w_v.data, atol=1e-12)


def test_ra_block_dim_mismatch():
    block = ResidualAttention(ParameterSet(), "ra", 8, 4, RngStream(0), np.float64)
    with pytest.raises(ValueError):
        block(Tensor(np.ones((5, 9))))


def test_tc_module_width_and_residual(rng):
    tc = TemporalConv(ParameterSet(), "tc", 161, 128, 2, 3, RngStream(0), np.float64)
    x = Tensor(rng.normal(size=(5, 161)))
    out = tc(x)
    assert out.shape == (5, 289)
    np.testing.assert_array_equal(out.data[:, :161], x.data)
    assert [b.dilation for b in tc.blocks] == [1, 2]


def test_tc_dilation_doubles():
    tc = TemporalConv(ParameterSet(), "tc", 10, 8, 4, 3, RngStream(0), np.float64)
    assert [b.dilation for b in tc.blocks] == [1, 2, 4, 8]
    assert tc.blocks[0].proj_w is not None and tc.blocks[1].proj_w is None


def test_tc_dim_mismatch():
    tc = TemporalConv(ParameterSet(), "tc", 10, 8, 2, 3, RngStream(0), np.float64)
    with pytest.raises(ValueError):
        tc(Tensor(np.ones((5, 11))))


# -- network -------------------------------------------------------------------


@pytest.mark.parametrize("f", [8, 16, 32, 64])
def test_embedding_width_always_128(f, rng):
    model = FssModel(ModelConfig(f=f), seed=1)
    feats, att = model.embed(rng.random((3, 66)))
    assert feats.shape == (3, 128)
    assert att.shape == (3, 66, 66)
    np.testing.assert_allclose(att.data.sum(-1), 1.0, atol=1e-6)


def test_embedding_identical_windows_identical_rows(rng):
    model = tiny()
    w = rng.random(66)
    feats, _ = model.embed(np.stack([w, rng.random(66), w]))
    np.testing.assert_array_equal(feats.data[0], feats.data[2])


def test_embedding_rejects_wrong_length():
    with pytest.raises(ValueError):
        tiny().embed(np.zeros((2, 65)))


def test_forward_shapes(easy_small):
    model = tiny()
    ep = sample_episode(easy_small, 2, 2, 1, RngStream(0))
    assert model_forward(model, ep).shape == (1, 2)
    batch = stack_episodes([sample_episode(easy_small, 2, 2, 1, RngStream(s)) for s in range(4)])
    assert model.forward(batch).shape == (4, 1, 2)


def test_forward_is_pure_in_inference(easy_small):
    model = tiny()
    ep = sample_episode(easy_small, 2, 2, 1, RngStream(3))
    a = model_forward(model, ep).data
    b = model_forward(model, ep).data
    assert np.array_equal(a, b)


def test_forward_arity_mismatch(easy_small):
    model = tiny()
    ep = sample_episode(easy_small, 2, 3, 1, RngStream(0))
    with pytest.raises(ValueError):
        model_forward(model, ep)


def test_attention_export(easy_small):
    ep = sample_episode(easy_small, 2, 2, 1, RngStream(0))
    maps = attention_maps(tiny(), ep)
    assert maps["embedding"].shape == (5, 66, 66)
    np.testing.assert_allclose(maps["embedding"].sum(-1), 1.0, atol=1e-6)
    for i in range(1, 5):
        assert maps[f"ra{i}"].shape == (5, 5)


# -- parameter counts ----------------------------------------------------------


def test_parameter_ratio_and_monotonicity():
    counts = {f: count_parameters(FssModel(ModelConfig(f=f))) for f in (8, 16, 32, 64)}
    assert counts[8] / counts[64] == pytest.approx(0.318, abs=0.08)
    assert counts[8] < counts[16] < counts[32] < counts[64]
    # same order of magnitude as the published 3,038,886
    assert 3_038_886 / 10 < counts[64] < 3_038_886 * 10


def test_parameter_count_closed_form():
    f, W, h = 8, 66, 256
    emb = (f * 3 + f) + 2 * f + 3 * f * f + (f * W * h + h) + (h * 128 + 128)
    ra = sum(d_in * 2 * dv * 2 + d_in * dv for d_in, dv in [(129, 32), (161 + f, 64), (225 + 2 * f, 128), (353 + 3 * f, 256)])

    def rdc(c_in):
        extra = (f * c_in + f) if c_in != f else 0
        return (f * c_in * 3 + f) + (f * f * 3 + f) + extra

    tc = sum(rdc(d_in) + rdc(f) for d_in in (161, 225 + f, 353 + 2 * f))
    head = (609 + 3 * f) * 2 + 2
    assert count_parameters(FssModel(ModelConfig(f=f))) == emb + ra + tc + head


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, easy_small):
    model = FssModel(ModelConfig(f=16, dropout_rate=0.3), seed=5)
    model.bn_stats.mean[:] = np.arange(16)
    path = model.save(tmp_path / "m.ckpt", extra={"split_seed": 4})
    back = FssModel.load(path)
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.params.items(), back.params.items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_array_equal(back.bn_stats.mean, np.arange(16))
    ep = sample_episode(easy_small, 2, 2, 1, RngStream(0))
    np.testing.assert_array_equal(model_forward(model, ep).data, model_forward(back, ep).data)


def test_checkpoint_blob_is_little_endian_float32(tmp_path):
    model = tiny()
    path = model.save(tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt.bin").read_bytes()
    n_buf = 2 * model.config.f
    assert len(blob) == 4 * (model.count_parameters() + n_buf)
    first = sorted(model.params.names())[0]
    n = model.params[first].data.size
    np.testing.assert_array_equal(
        np.frombuffer(blob[: 4 * n], "<f4"), model.params[first].data.ravel().astype("<f4")
    )


def test_checkpoint_rejects_corruption(tmp_path):
    path = tiny().save(tmp_path / "m.ckpt")
    (tmp_path / "m.ckpt.bin").write_bytes(b"\0" * 12)
    with pytest.raises(ValueError):
        FssModel.load(path)
    path.write_text(path.read_text().replace("fss-v1", "fss-v0"))
    with pytest.raises(ValueError):
        FssModel.load(path)
