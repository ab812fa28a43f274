"""Pairwise contrastive objective built from a cosine-similarity critic.

For an anchor code ``c`` and two other codes ``z``, ``z_bar`` from the same
batch, the pair predictor scores how differently the anchor relates to the
two. Pairs drawn from the same trend class should score near 1, pairs from
opposite classes near 0; the loss compares these scores against XOR labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .autograd import cosine_similarity as _cosine
from .errors import ContractViolation, InsufficientBatch, ShapeError

LN2 = math.log(2.0)


def _tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr if arr.dtype.kind == "f" else arr.astype(np.float64))


def cosine_similarity(c, z) -> Tensor:
    """Normalised inner product along the last axis; 0 if either norm < 1e-12."""
    c, z = _tensor(c), _tensor(z)
    if c.shape[-1] != z.shape[-1]:
        raise ShapeError(f"cannot compare vectors of dimension {c.shape[-1]} and {z.shape[-1]}")
    return _cosine(c, z)


def critic(c, z) -> Tensor:
    return cosine_similarity(c, z).exp()


def pair_prediction(c, z, z_bar) -> Tensor:
    """``-log2 sigmoid(|d(c, z) - d(c, z_bar)|)``, in (0, 1]."""
    s = (cosine_similarity(c, z) - cosine_similarity(c, z_bar)).abs()
    # -log2 sigmoid(s) == softplus(-s) / ln 2
    return (-s).softplus() * (1.0 / LN2)


@dataclass
class PairBatch:
    """Index triples into a batch of context vectors plus the XOR labels.

    Row ``i`` pairs anchor ``anchor[i]`` with ``z = codes[j[i]]`` and
    ``z_bar = codes[k[i]]``.
    """

    anchor: np.ndarray
    j: np.ndarray
    k: np.ndarray
    y_tilde: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def gather(self, codes):
        codes = _tensor(codes)
        return codes[self.anchor], codes[self.j], codes[self.k]


def sample_pairs(labels, seed: int | np.random.Generator = 0) -> PairBatch:
    """Draw one ``(j, k)`` per anchor with ``i, j, k`` pairwise distinct.

    Draws are uniform and independent across anchors. ``y_tilde`` is
    ``labels[j] XOR labels[k]``: 0 for a same-class pair, 1 otherwise.
    """
    y = np.asarray(labels, dtype=np.int64)
    b = len(y)
    if b < 3:
        raise InsufficientBatch(f"pair sampling needs at least 3 samples per batch, got {b}")
    if np.any((y != 0) & (y != 1)):
        raise ContractViolation("labels must be 0 or 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    i = np.arange(b)
    j = rng.integers(0, b - 1, size=b)
    j += j >= i
    k = rng.integers(0, b - 2, size=b)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k += k >= lo
    k += k >= hi
    return PairBatch(i, j, k, y[j] ^ y[k])


def contrastive_loss(y_hat, y_tilde) -> Tensor:
    """Batch mean of ``y~ * y^ + (1 - y~) * (1 - y^)``."""
    y_hat = _tensor(y_hat)
    yt = np.asarray(y_tilde, dtype=y_hat.dtype)
    if y_hat.data.size == 0:
        raise ContractViolation("contrastive loss of an empty batch")
    if yt.shape != y_hat.shape:
        raise ShapeError(f"{yt.shape} labels for {y_hat.shape} predictions")
    return (y_hat * yt + (1.0 - y_hat) * (1.0 - yt)).mean()


def batch_loss(codes: Tensor, pairs: PairBatch) -> Tensor:
    c, z, z_bar = pairs.gather(codes)
    return contrastive_loss(pair_prediction(c, z, z_bar), pairs.y_tilde)


def cmi_lower_bound(c, z, z_bar) -> float:
    """Batch mean of ``log2 f(c,z) / (f(c,z) + f(c,z_bar))`` in bits.

    Never positive; adding one bit gives the implied estimate of the mutual
    information between the binary label and the code pair.
    """
    d1 = np.atleast_1d(cosine_similarity(c, z).data).astype(np.float64)
    d2 = np.atleast_1d(cosine_similarity(c, z_bar).data).astype(np.float64)
    if d1.size == 0:
        raise ContractViolation("lower bound of an empty batch")
    # log(e^a / (e^a + e^b)) = -log(1 + e^(b - a))
    return float(np.mean(-np.logaddexp(0.0, d2 - d1)) / LN2)


def pair_capacity(n: int) -> int:
    """Number of distinct unordered pairs among ``n`` samples."""
    if n < 0:
        raise ContractViolation(f"sample count must be non-negative, got {n}")
    return n * (n - 1) // 2
