"""Dilated causal convolutional encoder with stock-identity conditioning.

Layout: 1x1 input projection, a stack of residual blocks whose dilation
doubles per block, the sum of the blocks' skip outputs passed through ReLU
and a 1x1 projection to per-timestep latents, then a pooling head that
turns the latent sequence into one context vector per window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, conv1d_causal, dense, softmax
from .errors import ConfigError, ShapeError, TrainingDiverged
from .features import N_FEATURES

CONTEXT_MODES = ("attention", "max", "avg", "concat_dense", "last")


def receptive_field(layers: int, kernel_size: int) -> int:
    """Timesteps seen by the last output of ``layers`` doubling-dilation layers."""
    if layers < 1 or kernel_size < 1:
        raise ConfigError(f"need layers >= 1 and kernel_size >= 1, got {layers}, {kernel_size}")
    return 2 ** (layers - 1) * kernel_size


@dataclass
class EncoderConfig:
    blocks: int = 6
    kernel_size: int = 2
    channels: int = 77
    latent_dim: int = 96
    window: int = 64
    n_features: int = N_FEATURES
    use_identity: bool = True
    n_stocks: int = 1
    context_mode: str = "attention"

    def validate(self) -> "EncoderConfig":
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"unknown context_mode {self.context_mode!r}; choose from {CONTEXT_MODES}")
        for name in ("channels", "latent_dim", "window", "n_features", "n_stocks"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if receptive_field(self.blocks, self.kernel_size) < self.window:
            raise ConfigError(f"receptive field {receptive_field(self.blocks, self.kernel_size)} "
                              f"is shorter than the window {self.window}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def dilations(config: EncoderConfig) -> list[int]:
    return [2 ** i for i in range(config.blocks)]


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: EncoderConfig, seed: int | np.random.Generator = 0, head: bool = False) -> dict[str, Tensor]:
    """Seeded parameters, ordered as they are consumed by the forward pass.

    Convolution and projection weights get He-uniform fan-in scaling. Biases,
    identity weights ``u`` and the attention matrix start at zero, so a fresh
    encoder pools with uniform attention and ignores the stock identity.
    """
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ch, D, k = config.channels, config.latent_dim, config.kernel_size
    arrays: dict[str, np.ndarray] = {
        "in.w": _he_uniform(rng, (config.n_features, ch), config.n_features),
        "in.b": np.zeros(ch, np.float32),
    }
    for i in range(config.blocks):
        # residual accumulation: scale block filters down so activations stay O(1)
        arrays[f"block{i}.w"] = _he_uniform(rng, (k, ch, ch), k * ch) / np.sqrt(config.blocks)
        arrays[f"block{i}.b"] = np.zeros(ch, np.float32)
        if config.use_identity:
            arrays[f"block{i}.u"] = np.zeros((config.n_stocks, ch), np.float32)
    arrays["out.w"] = _he_uniform(rng, (ch, D), ch)
    arrays["out.b"] = np.zeros(D, np.float32)
    if config.context_mode == "attention":
        arrays["attn.a"] = np.zeros((config.window, D), np.float32)
    elif config.context_mode == "concat_dense":
        arrays["concat.w"] = _he_uniform(rng, (config.window * D, D), config.window * D)
        arrays["concat.b"] = np.zeros(D, np.float32)
    if head:
        arrays["head.w"] = _he_uniform(rng, (D, 1), D) * 0.1
        arrays["head.b"] = np.zeros(1, np.float32)
    return {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}


def one_hot(stock_ids, n_stocks: int, dtype=np.float32) -> np.ndarray:
    """One-hot rows; ids outside ``[0, n_stocks)`` map to the zero vector."""
    ids = np.atleast_1d(np.asarray(stock_ids, dtype=np.int64))
    out = np.zeros((len(ids), n_stocks), dtype=dtype)
    ok = (ids >= 0) & (ids < n_stocks)
    out[np.nonzero(ok)[0], ids[ok]] = 1
    return out


def residual_block(h: Tensor, w: Tensor, b: Tensor | None, dilation: int, stock_onehot=None,
                   u: Tensor | None = None, activation: Callable[[Tensor], Tensor] = Tensor.relu):
    """One residual block; returns ``(h + core, core)``.

    ``core = act(w * h + b + u^T v)`` where ``v`` is the stock one-hot. The
    identity term is skipped when ``u`` is None.
    """
    z = conv1d_causal(h, w, dilation)
    if b is not None:
        z = z + b
    if u is not None:
        if stock_onehot is None:
            raise ShapeError("identity conditioning needs a stock one-hot")
        v = stock_onehot if isinstance(stock_onehot, Tensor) else Tensor(stock_onehot, dtype=u.dtype)
        if v.shape[-1] != u.shape[0]:
            raise ShapeError(f"one-hot length {v.shape[-1]} does not match n_stocks {u.shape[0]}")
        bias = v @ u
        z = z + bias.reshape(bias.shape[:-1] + (1, bias.shape[-1])) if bias.ndim > 1 else z + bias
    core = activation(z)
    return h + core, core


def encode_sequence(params: dict[str, Tensor], x, config: EncoderConfig, stock_onehot=None,
                    activation: Callable[[Tensor], Tensor] = Tensor.relu) -> Tensor:
    """Per-timestep latents ``[..., T, latent_dim]`` for windows ``[..., T, n_features]``.

    Every output position depends only on inputs at or before it.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != config.n_features:
        raise ShapeError(f"expected {config.n_features} input channels, got {x.shape[-1]}")
    h = dense(x, params["in.w"], params["in.b"])
    skips = None
    for i, d in enumerate(dilations(config)):
        u = params.get(f"block{i}.u") if config.use_identity else None
        h, skip = residual_block(h, params[f"block{i}.w"], params[f"block{i}.b"], d, stock_onehot, u, activation)
        skips = skip if skips is None else skips + skip
    e = dense(activation(skips), params["out.w"], params["out.b"])
    if not np.all(np.isfinite(e.data)):
        raise TrainingDiverged("non-finite encoder activations")
    return e


def attention_context(e: Tensor, A: Tensor) -> tuple[Tensor, Tensor]:
    """Attention pooling over time: one learned weight vector per position.

    Returns ``(context, alpha)`` with ``alpha`` of shape ``[..., T]``.
    """
    if A.shape != e.shape[-2:]:
        raise ShapeError(f"attention weights {A.shape} do not match latents {e.shape[-2:]}")
    logits = (e * A).sum(axis=-1)
    alpha = softmax(logits, axis=-1)
    c = (e * alpha.reshape(alpha.shape + (1,))).sum(axis=-2)
    return c, alpha


def pooled_context(e: Tensor, mode: str, params: dict[str, Tensor] | None = None) -> Tensor:
    if mode == "max":
        return e.max(axis=-2)
    if mode == "avg":
        return e.mean(axis=-2)
    if mode == "last":
        return e[..., -1, :]
    if mode == "concat_dense":
        if params is None or "concat.w" not in params:
            raise ConfigError("concat_dense pooling needs concat.w / concat.b parameters")
        flat = e.reshape(e.shape[:-2] + (e.shape[-2] * e.shape[-1],))
        return dense(flat, params["concat.w"], params["concat.b"])
    raise ConfigError(f"unknown pooling mode {mode!r}")


def context_vectors(params: dict[str, Tensor], x, stock_ids, config: EncoderConfig,
                    activation: Callable[[Tensor], Tensor] = Tensor.relu) -> Tensor:
    """Windows ``[B, T, F]`` and stock ids ``[B]`` to contexts ``[B, latent_dim]``."""
    onehot = one_hot(stock_ids, config.n_stocks) if config.use_identity else None
    e = encode_sequence(params, x, config, onehot, activation)
    if config.context_mode == "attention":
        return attention_context(e, params["attn.a"])[0]
    return pooled_context(e, config.context_mode, params)


def encode_dataset(params: dict[str, Tensor], x: np.ndarray, stock_ids: np.ndarray, config: EncoderConfig,
                   batch_size: int = 512) -> np.ndarray:
    """Context vectors for a whole dataset without recording a graph."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    out = np.zeros((len(x), config.latent_dim), dtype=np.float32)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = context_vectors(frozen, x[sl], stock_ids[sl], config).data
    return out
