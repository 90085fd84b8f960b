"""
Attention layers shared by every encoder and by the multimodal block.

Parameters live in one flat dict keyed by dotted names
("recipe.T.title.layer0.self_attn.query.weight"); each function here takes
that dict plus the name prefix of the block it runs. Blocks use post-norm
residual placement and no causal mask.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from modules.errors import ConfigError, DimensionError
from modules.tensor import (
    Tensor, add, concat, dropout, gelu, layer_norm, matmul, reshape,
    scale, softmax_rows, transpose,
)


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 128
    num_layers: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("num_heads", "model_dim", "ff_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class TokenSequence:
    """Packed token matrix [..., L, d]; leading axes batch equal-length sequences."""

    tokens: Tensor

    @property
    def length(self):
        return self.tokens.shape[-2]

    @property
    def dim(self):
        return self.tokens.shape[-1]


# ==============================
#  Score-matrix entry counter
# ==============================
class ScoreCounter:
    def __init__(self):
        self.entries = 0
        self.calls = 0


_COUNTERS = []
_COUNTER_LOCK = threading.Lock()


@contextmanager
def count_score_entries():
    """
    Count attention score-matrix entries computed inside the block.

    One entry per (query token, key token) pair per sequence; the count is
    the same for every head, so heads are not multiplied in.
    """
    counter = ScoreCounter()
    with _COUNTER_LOCK:
        _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        with _COUNTER_LOCK:
            _COUNTERS.remove(counter)


def _record_scores(q_shape, kv_length):
    if not _COUNTERS:
        return
    sequences = int(np.prod(q_shape[:-2])) if len(q_shape) > 2 else 1
    entries = sequences * q_shape[-2] * kv_length
    with _COUNTER_LOCK:
        for counter in _COUNTERS:
            counter.entries += entries
            counter.calls += 1


# ==============================
#  Parameter initialisation
# ==============================
def init_linear(rng, params, name, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    params[f"{name}.weight"] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_layer_norm(params, name, dim):
    params[f"{name}.gamma"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(dim), requires_grad=True)


def init_attention(rng, params, name, dim):
    for projection in ("query", "key", "value", "output"):
        init_linear(rng, params, f"{name}.{projection}", dim, dim)


def init_decoder_block(rng, params, name, cfg, cross=True):
    d = cfg.model_dim
    for layer in range(cfg.num_layers):
        prefix = f"{name}.layer{layer}"
        init_attention(rng, params, f"{prefix}.self_attn", d)
        init_layer_norm(params, f"{prefix}.norm_self", d)
        if cross:
            init_attention(rng, params, f"{prefix}.cross_attn", d)
            init_layer_norm(params, f"{prefix}.norm_cross", d)
        init_linear(rng, params, f"{prefix}.ff.hidden", d, cfg.ff_dim)
        init_linear(rng, params, f"{prefix}.ff.output", cfg.ff_dim, d)
        init_layer_norm(params, f"{prefix}.norm_ff", d)


def init_encoder_block(rng, params, name, cfg):
    init_decoder_block(rng, params, name, cfg, cross=False)


def linear(params, name, x):
    return add(matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


# ==============================
#  Positional encodings
# ==============================
@lru_cache(maxsize=64)
def sinusoidal_positions(length, dim):
    position = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates[: dim // 2])
    table.setflags(write=False)
    return table


def add_positions(x):
    return add(x, Tensor(sinusoidal_positions(x.shape[-2], x.shape[-1])))


# ==============================
#  Attention
# ==============================
def _split_heads(x, heads):
    *lead, length, dim = x.shape
    x = reshape(x, (*lead, length, heads, dim // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, axes)


def _merge_heads(x):
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, axes)
    *lead, length, heads, dh = x.shape
    return reshape(x, (*lead, length, heads * dh))


def multi_head_attention(params, name, q, kv, cfg, rng=None, weights_out=None):
    """
    Scaled dot-product attention of q over kv, heads concatenated and
    projected. Keys and values are both projected from kv.

    When `weights_out` is a list, the post-softmax weights
    [..., heads, Lq, Lkv] are appended to it.
    """
    d = cfg.model_dim
    if q.dim != d or kv.dim != d:
        raise DimensionError(
            f"attention expects model_dim {d}, got query {q.tokens.shape} and key/value {kv.tokens.shape}"
        )
    heads = cfg.num_heads
    queries = _split_heads(linear(params, f"{name}.query", q.tokens), heads)
    keys = _split_heads(linear(params, f"{name}.key", kv.tokens), heads)
    values = _split_heads(linear(params, f"{name}.value", kv.tokens), heads)

    scores = scale(matmul(queries, transpose(keys)), 1.0 / np.sqrt(d // heads))
    _record_scores(q.tokens.shape, kv.length)
    weights = softmax_rows(scores)
    if weights_out is not None:
        weights_out.append(weights.data)
    context = matmul(dropout(weights, cfg.dropout_rate, rng), values)
    return TokenSequence(linear(params, f"{name}.output", _merge_heads(context)))


def feed_forward(params, name, x, cfg, rng=None):
    hidden = gelu(linear(params, f"{name}.hidden", x))
    return linear(params, f"{name}.output", dropout(hidden, cfg.dropout_rate, rng))


def _add_norm(params, name, x, update, cfg, rng):
    return layer_norm(
        add(x, dropout(update, cfg.dropout_rate, rng)),
        params[f"{name}.gamma"], params[f"{name}.beta"],
    )


def _run_block(params, name, q, kv, cfg, rng):
    x = q.tokens
    for layer in range(cfg.num_layers):
        prefix = f"{name}.layer{layer}"
        seq = TokenSequence(x)
        x = _add_norm(params, f"{prefix}.norm_self", x,
                      multi_head_attention(params, f"{prefix}.self_attn", seq, seq, cfg, rng).tokens, cfg, rng)
        if kv is not None:
            cross = multi_head_attention(params, f"{prefix}.cross_attn", TokenSequence(x), kv, cfg, rng)
            x = _add_norm(params, f"{prefix}.norm_cross", x, cross.tokens, cfg, rng)
        x = _add_norm(params, f"{prefix}.norm_ff", x, feed_forward(params, f"{prefix}.ff", x, cfg, rng), cfg, rng)
    return TokenSequence(x)


def decoder_block(params, name, q, kv, cfg, rng=None):
    """Self-attention, cross-attention over kv, feed-forward; repeated num_layers times."""
    return _run_block(params, name, q, kv, cfg, rng)


def encoder_block(params, name, x, cfg, rng=None):
    return _run_block(params, name, x, None, cfg, rng)


def stack_sequences(sequences):
    """Stack equal-shape [L, d] sequences into one [n, L, d] batch."""
    return TokenSequence(concat([reshape(s.tokens, (1, *s.tokens.shape)) for s in sequences], axis=0))
