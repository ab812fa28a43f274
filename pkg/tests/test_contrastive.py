import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmiforecast.autograd import Tensor, backward, grad_check
from cmiforecast.contrastive import (PairBatch, batch_loss, cmi_lower_bound, contrastive_loss, cosine_similarity,
                                     critic, pair_capacity, pair_prediction, sample_pairs)
from cmiforecast.encoder import EncoderConfig, context_vectors, init_params
from cmiforecast.errors import ContractViolation, InsufficientBatch, ShapeError


def scalar_pred(d1, d2):
    s = abs(d1 - d2)
    return -math.log2(1.0 / (1.0 + math.exp(-s)))


@pytest.mark.parametrize("c, z, d", [
    ([0.3, -2.0, 1.0], [0.3, -2.0, 1.0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 1], [-1, -1], -1.0),
    ([0, 0], [1, 1], 0.0),
])
def test_cosine_examples(c, z, d):
    assert cosine_similarity(np.array(c, float), np.array(z, float)).item() == pytest.approx(d, abs=1e-12)


def test_cosine_dimension_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarity(np.ones(3), np.ones(2))


@pytest.mark.parametrize("c, z, f", [([1, 0], [0, 1], 1.0), ([1, 0], [2, 0], math.e), ([1, 0], [-1, 0], 1 / math.e)])
def test_critic_examples(c, z, f):
    assert critic(np.array(c, float), np.array(z, float)).item() == pytest.approx(f, rel=1e-12)


def test_pair_prediction_examples():
    u = np.array([1.0, 0.0])
    assert pair_prediction(u, u, u).item() == pytest.approx(1.0)
    assert pair_prediction(u, u, -u).item() == pytest.approx(0.18312, abs=1e-5)
    assert pair_prediction(u, u, -u).item() == pytest.approx(scalar_pred(1, -1), rel=1e-12)


def test_pair_prediction_large_gap_vanishes():
    # cosine is bounded, so evaluate the underlying form at s = 10 via the scalar oracle path
    s = Tensor(np.array([10.0]))
    y = (-s).softplus() * (1 / math.log(2))
    assert y.item() < 0.01
    assert y.item() == pytest.approx(scalar_pred(10, 0), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2))
def test_pair_prediction_monotone_in_gap(a, b):
    ya = (-Tensor(np.array([a]))).softplus().item() / math.log(2)
    yb = (-Tensor(np.array([b]))).softplus().item() / math.log(2)
    if b - a > 1e-9:
        assert ya > yb
    elif a <= b:
        assert ya >= yb
    assert 0 < ya <= 1


def test_sample_pairs_xor():
    pb = PairBatch(np.array([0]), np.array([1]), np.array([2]), np.array([0]))
    assert len(pb) == 1
    y = np.array([0, 1, 1, 0])
    pairs = sample_pairs(y, 3)
    for i, j, k, t in zip(pairs.anchor, pairs.j, pairs.k, pairs.y_tilde):
        assert t == (y[j] ^ y[k])
    assert (1 ^ 1) == 0 and (1 ^ 0) == 1


def test_sample_pairs_deterministic():
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    a, b = sample_pairs(y, 42), sample_pairs(y, 42)
    for f in ("anchor", "j", "k", "y_tilde"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_sample_pairs_small_batch():
    with pytest.raises(InsufficientBatch):
        sample_pairs([0, 1], 0)
    with pytest.raises(ContractViolation):
        sample_pairs([0, 1, 2], 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=3, max_size=40), st.integers(0, 2**31))
def test_sample_pairs_distinct_and_xor(labels, seed):
    y = np.array(labels)
    p = sample_pairs(y, seed)
    np.testing.assert_array_equal(p.anchor, np.arange(len(y)))
    assert np.all((p.anchor != p.j) & (p.anchor != p.k) & (p.j != p.k))
    assert np.all((p.j >= 0) & (p.j < len(y)) & (p.k >= 0) & (p.k < len(y)))
    np.testing.assert_array_equal(p.y_tilde, [y[j] ^ y[k] for j, k in zip(p.j, p.k)])


def test_sample_pairs_covers_all_ordered_pairs():
    # b = 3: each anchor has exactly two valid (j, k) orderings, both must appear
    seen = set()
    for seed in range(200):
        p = sample_pairs([0, 1, 0], seed)
        seen.update(zip(p.anchor.tolist(), p.j.tolist(), p.k.tolist()))
    expected = {t for t in itertools.permutations(range(3), 3)}
    assert seen == expected


@pytest.mark.parametrize("y_hat, y_t, loss", [
    ([0.0, 0.0], [1, 1], 0.0),
    ([1.0, 1.0], [0, 0], 0.0),
    ([0.2, 0.8], [1, 0], 0.2),
])
def test_contrastive_loss_examples(y_hat, y_t, loss):
    assert contrastive_loss(np.array(y_hat), np.array(y_t)).item() == pytest.approx(loss, abs=1e-12)


def test_contrastive_loss_empty():
    with pytest.raises(ContractViolation):
        contrastive_loss(np.zeros(0), np.zeros(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31))
def test_contrastive_loss_bounded(n, seed):
    r = np.random.default_rng(seed)
    v = contrastive_loss(r.uniform(1e-9, 1, n), r.integers(0, 2, n)).item()
    assert 0 <= v <= 1


def test_cmi_lower_bound_examples():
    u = np.array([[1.0, 0.0]])
    assert cmi_lower_bound(u, u, u) == pytest.approx(-1.0)
    expected = math.log2(math.e / (math.e + 1 / math.e))
    assert cmi_lower_bound(u, u, -u) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-0.1831, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31))
def test_cmi_lower_bound_matches_scalar_oracle(n, seed):
    r = np.random.default_rng(seed)
    c, z, zb = (r.normal(size=(n, 4)) for _ in range(3))

    def cos(a, b):
        return float(a @ b) / math.sqrt(float(a @ a) * float(b @ b))
    terms = [math.log2(math.exp(cos(c[i], z[i])) / (math.exp(cos(c[i], z[i])) + math.exp(cos(c[i], zb[i]))))
             for i in range(n)]
    got = cmi_lower_bound(c, z, zb)
    assert got <= 0
    assert got == pytest.approx(sum(terms) / n, rel=1e-10)


@pytest.mark.parametrize("n, pairs", [(4, 6), (1987, 1_973_091), (1, 0), (0, 0)])
def test_pair_capacity(n, pairs):
    assert pair_capacity(n) == pairs


def test_pair_capacity_enumeration():
    for n in range(8):
        assert pair_capacity(n) == len(list(itertools.combinations(range(n), 2)))


def test_batch_loss_gradient_flows(tiny_encoder, rng):
    params = init_params(tiny_encoder, 0)
    x = rng.normal(size=(6, 16, 11)).astype(np.float32)
    codes = context_vectors(params, x, [0, 1, 2, 0, 1, 2], tiny_encoder)
    loss = batch_loss(codes, sample_pairs([0, 1, 0, 1, 1, 0], 0))
    backward(loss)
    assert 0 <= loss.item() <= 1
    assert np.abs(params["in.w"].grad).max() > 0


def test_encoder_contrastive_gradient_check():
    cfg = EncoderConfig(blocks=3, channels=3, latent_dim=3, window=8, n_stocks=2)

    def build(r):
        names = init_params(cfg, 0)
        params = {k: r.normal(0, 0.5, size=v.shape) for k, v in names.items()}
        x = r.normal(size=(5, 8, 11)).astype(np.float32)
        ids = np.array([0, 1, 0, 1, 1])
        pairs = sample_pairs([0, 1, 1, 0, 1], r)
        return params, lambda p: batch_loss(context_vectors(p, x, ids, cfg), pairs)
    report = grad_check(build, tolerance=1e-4, h=1e-3, seed=5)
    assert report.passed, str(report)
