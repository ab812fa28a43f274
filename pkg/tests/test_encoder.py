import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmiforecast.autograd import Tensor
from cmiforecast.encoder import (EncoderConfig, attention_context, context_vectors, dilations, encode_dataset,
                                 encode_sequence, init_params, one_hot, pooled_context, receptive_field,
                                 residual_block)
from cmiforecast.errors import ConfigError, ShapeError, TrainingDiverged


def identity(t):
    return t


@pytest.mark.parametrize("l, k, r", [(6, 2, 64), (1, 2, 2), (5, 2, 32), (4, 2, 16)])
def test_receptive_field(l, k, r):
    assert receptive_field(l, k) == r


def test_config_rejects_short_receptive_field():
    with pytest.raises(ConfigError):
        EncoderConfig(blocks=5, window=64).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(context_mode="median").validate()


def test_default_dilations():
    assert dilations(EncoderConfig()) == [1, 2, 4, 8, 16, 32]


def test_default_output_shape():
    cfg = EncoderConfig(n_stocks=2)
    params = init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(64, 11)).astype(np.float32)
    e = encode_sequence(params, x, cfg, one_hot([1], 2)[0])
    assert e.shape == (64, 96)
    assert context_vectors(params, x[None], [1], cfg).shape == (1, 96)


def test_residual_block_zero_input():
    h = Tensor(np.zeros((6, 3), np.float32))
    w = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32))
    out, core = residual_block(h, w, Tensor(np.zeros(3, np.float32)), 2, one_hot([0], 2)[0],
                               Tensor(np.zeros((2, 3), np.float32)))
    np.testing.assert_array_equal(core.data, 0.0)
    np.testing.assert_array_equal(out.data, h.data)


def test_residual_block_identity_changes_output(rng):
    h = Tensor(rng.normal(size=(6, 3)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 3, 3)).astype(np.float32))
    u = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
    a, _ = residual_block(h, w, None, 1, one_hot([0], 2)[0], u)
    b, _ = residual_block(h, w, None, 1, one_hot([1], 2)[0], u)
    assert not np.array_equal(a.data, b.data)
    # oracle: ReLU(conv + u[id]) added to h
    from tests.test_autograd import conv_oracle
    core = np.maximum(conv_oracle(h.data.astype(np.float64), w.data.astype(np.float64), 1) + u.data[1], 0)
    np.testing.assert_allclose(b.data, h.data + core, rtol=1e-5, atol=1e-6)


def test_residual_block_onehot_mismatch():
    h = Tensor(np.zeros((4, 3), np.float32))
    w = Tensor(np.zeros((2, 3, 3), np.float32))
    with pytest.raises(ShapeError):
        residual_block(h, w, None, 1, one_hot([0], 3)[0], Tensor(np.zeros((2, 3), np.float32)))


def test_one_hot_unseen_id_is_zero():
    np.testing.assert_array_equal(one_hot([0, 5, -1], 3), [[1, 0, 0], [0, 0, 0], [0, 0, 0]])


def random_params(cfg, seed):
    """Seeded params with every tensor nonzero (the default init zeroes some)."""
    r = np.random.default_rng(seed)
    return {k: Tensor(r.normal(0, 0.3, size=v.shape).astype(np.float32)) for k, v in init_params(cfg, seed).items()}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(0, 14))
def test_encoder_causal_prefix_bit_identical(tiny_encoder, seed, t):
    params = random_params(tiny_encoder, seed)
    r = np.random.default_rng(seed + 1)
    x = r.normal(size=(16, 11)).astype(np.float32)
    v = one_hot([seed % 3], 3)[0]
    base = encode_sequence(params, x, tiny_encoder, v).data
    x2 = x.copy()
    x2[t + 1:] = r.normal(size=x2[t + 1:].shape)
    pert = encode_sequence(params, x2, tiny_encoder, v).data
    assert np.array_equal(base[:t + 1], pert[:t + 1])


def linear_jacobian_column(params, cfg, v, T, src):
    """Sensitivity of the last latent to input step ``src`` with identity activations."""
    x = np.zeros((T, cfg.n_features), np.float64)
    p64 = {k: Tensor(t.data.astype(np.float64)) for k, t in params.items()}
    zero = encode_sequence(p64, x, cfg, v, activation=identity).data[-1]
    x[src] = 1.0
    return encode_sequence(p64, x, cfg, v, activation=identity).data[-1] - zero


def test_linearized_receptive_field():
    cfg = EncoderConfig(channels=4, latent_dim=3, n_stocks=2)
    params = random_params(cfg, 11)
    v = one_hot([0], 2)[0]
    T = 100
    inside = [linear_jacobian_column(params, cfg, v, T, s) for s in (T - 64, T - 1)]
    outside = [linear_jacobian_column(params, cfg, v, T, s) for s in (0, T - 66, T - 65)]
    assert all(np.abs(c).max() > 0 for c in inside)
    assert all(np.array_equal(c, np.zeros_like(c)) for c in outside)


def test_identity_off_ignores_stock():
    cfg = EncoderConfig(blocks=4, channels=5, latent_dim=4, window=16, n_stocks=3, use_identity=False)
    params = random_params(cfg, 2)
    x = np.random.default_rng(0).normal(size=(2, 16, 11)).astype(np.float32)
    a = context_vectors(params, x, [0, 0], cfg).data
    b = context_vectors(params, x, [2, 1], cfg).data
    assert a.tobytes() == b.tobytes()


def test_non_finite_raises(tiny_encoder):
    params = init_params(tiny_encoder, 0)
    x = np.full((16, 11), np.inf, np.float32)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            encode_sequence(params, x, tiny_encoder, one_hot([0], 3)[0])


# -- pooling ----------------------------------------------------------------------

def test_attention_zero_weights_is_mean(rng):
    e = Tensor(rng.normal(size=(7, 4)))
    c, alpha = attention_context(e, Tensor(np.zeros((7, 4))))
    np.testing.assert_allclose(alpha.data, 1 / 7)
    np.testing.assert_allclose(c.data, e.data.mean(axis=0), rtol=1e-12)


def test_attention_singleton(rng):
    e = Tensor(rng.normal(size=(1, 4)))
    c, alpha = attention_context(e, Tensor(rng.normal(size=(1, 4))))
    assert alpha.data[0] == 1.0
    np.testing.assert_allclose(c.data, e.data[0])


def test_attention_dominant_logit():
    e = np.eye(3)
    A = np.zeros((3, 3))
    A[1, 1] = 20.0
    c, alpha = attention_context(Tensor(e), Tensor(A))
    assert alpha.data[1] > 0.999
    np.testing.assert_allclose(c.data, e[1], atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), T=st.integers(1, 12), scale=st.floats(0.01, 30))
def test_attention_simplex_and_convex_hull(seed, T, scale):
    r = np.random.default_rng(seed)
    e = r.normal(size=(2, T, 3))
    c, alpha = attention_context(Tensor(e), Tensor(scale * r.normal(size=(T, 3))))
    assert np.all(alpha.data >= 0)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(c.data <= e.max(axis=1) + 1e-9)
    assert np.all(c.data >= e.min(axis=1) - 1e-9)


def test_pooling_constant_sequence():
    e = Tensor(np.tile([1.5, -2.0, 0.25], (5, 1)))
    for mode in ("max", "avg", "last"):
        np.testing.assert_allclose(pooled_context(e, mode).data, [1.5, -2.0, 0.25])


def test_avg_example():
    np.testing.assert_array_equal(pooled_context(Tensor(np.array([[0.0, 2.0], [2.0, 0.0]])), "avg").data, [1, 1])


@pytest.mark.parametrize("window, blocks", [(8, 3), (16, 4)])
def test_concat_dense_dimension(window, blocks):
    cfg = EncoderConfig(blocks=blocks, channels=3, latent_dim=5, window=window, context_mode="concat_dense")
    params = init_params(cfg, 0)
    x = np.zeros((2, window, 11), np.float32)
    assert context_vectors(params, x, [0, 0], cfg).shape == (2, 5)


def test_unknown_pooling_mode():
    with pytest.raises(ConfigError):
        pooled_context(Tensor(np.zeros((2, 2))), "median")


def test_encode_dataset_matches_context_vectors(tiny_encoder, rng):
    params = random_params(tiny_encoder, 4)
    x = rng.normal(size=(7, 16, 11)).astype(np.float32)
    ids = np.array([0, 1, 2, 0, 1, 2, 0])
    full = context_vectors(params, x, ids, tiny_encoder).data
    np.testing.assert_allclose(encode_dataset(params, x, ids, tiny_encoder, batch_size=3), full, rtol=1e-6)


def test_init_deterministic(tiny_encoder):
    a, b = init_params(tiny_encoder, 9), init_params(tiny_encoder, 9)
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
