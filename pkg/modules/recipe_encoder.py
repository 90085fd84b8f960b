"""
Hierarchical recipe encoder.

Level 1: per-entity transformers T over word tokens (title directly,
ingredient and instruction sentences mean-pooled to one vector each), then
entity-level transformers HT over the sentence vectors. Level 2 (HTD): each
entity's tokens query the tokens of the other entities through a
transformer decoder. The three entity token sets are averaged,
concatenated and projected to the recipe embedding e_R.
"""
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from modules.errors import ConfigError, InputError
from modules.tensor import (
    Tensor, concat, embedding_lookup, l2_normalize_rows, mean_along_axis, reshape,
)
from modules.transformer import (
    AttentionConfig, TokenSequence, add_positions, decoder_block, encoder_block,
    init_decoder_block, init_encoder_block, init_linear, linear,
)

ENTITIES = ("title", "ingredients", "instructions")
HTD_VARIANTS = ("v1", "v2")


@dataclass(frozen=True)
class RecipeConfig:
    vocab_size: int = 256
    model_dim: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    htd_layers: int = 2
    ff_dim: int = 128
    dropout_rate: float = 0.1
    use_htd: bool = True
    htd_variant: str = "v1"
    htd_shared: bool = True
    positional: bool = True
    max_title_tokens: int = 8
    max_sentences: int = 12
    max_ingredient_tokens: int = 6
    max_instruction_tokens: int = 8

    def __post_init__(self):
        if self.htd_variant not in HTD_VARIANTS:
            raise ConfigError(f"htd_variant must be one of {HTD_VARIANTS}, got {self.htd_variant!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        self.attention()

    def attention(self):
        return AttentionConfig(self.num_heads, self.model_dim, self.ff_dim, self.num_layers, self.dropout_rate)

    def htd_attention(self):
        return AttentionConfig(self.num_heads, self.model_dim, self.ff_dim, self.htd_layers, self.dropout_rate)


@dataclass
class RecipeSample:
    title: list
    ingredients: list
    instructions: list
    class_label: Optional[int] = None

    def validate(self, vocab_size):
        if not self.title:
            raise InputError("recipe title is empty")
        if not self.ingredients or not self.instructions:
            raise InputError("recipe needs at least one ingredient and one instruction sentence")
        for entity, sentences in (("ingredients", self.ingredients), ("instructions", self.instructions)):
            if any(len(s) == 0 for s in sentences):
                raise InputError(f"recipe has an empty sentence in {entity}")
        ids = list(self.title) + [t for s in self.ingredients + self.instructions for t in s]
        if min(ids) < 0 or max(ids) >= vocab_size:
            raise InputError(f"token ids must lie in [0, {vocab_size}), got range [{min(ids)}, {max(ids)}]")
        if self.class_label is not None and self.class_label < 0:
            raise InputError(f"class_label must be nonnegative, got {self.class_label}")

    def truncated(self, cfg):
        return RecipeSample(
            title=list(self.title[: cfg.max_title_tokens]),
            ingredients=[list(s[: cfg.max_ingredient_tokens]) for s in self.ingredients[: cfg.max_sentences]],
            instructions=[list(s[: cfg.max_instruction_tokens]) for s in self.instructions[: cfg.max_sentences]],
            class_label=self.class_label,
        )


@dataclass
class RecipeTokens:
    t_ttl: TokenSequence
    t_ing: TokenSequence
    t_ins: TokenSequence
    t_R: TokenSequence
    e_R: Optional[Tensor] = field(default=None)

    @property
    def spans(self):
        return (self.t_ttl.length, self.t_ing.length, self.t_ins.length)


# ==============================
#  Parameters
# ==============================
def _htd_name(cfg, entity):
    return "recipe.HTD" if cfg.htd_shared else f"recipe.HTD.{entity}"


def init_recipe_encoder(rng, params, cfg):
    d = cfg.model_dim
    params["recipe.embedding"] = Tensor(rng.normal(0.0, d ** -0.5, (cfg.vocab_size, d)), requires_grad=True)
    for entity in ENTITIES:
        init_encoder_block(rng, params, f"recipe.T.{entity}", cfg.attention())
    for entity in ENTITIES[1:]:
        init_encoder_block(rng, params, f"recipe.HT.{entity}", cfg.attention())
    if cfg.use_htd:
        names = {_htd_name(cfg, entity) for entity in ENTITIES}
        for name in sorted(names):
            init_decoder_block(rng, params, name, cfg.htd_attention())
    init_linear(rng, params, "recipe.projection", 3 * d, cfg.embed_dim)


# ==============================
#  Level 1: T and HT
# ==============================
def _embed(params, ids, cfg):
    tokens = embedding_lookup(params["recipe.embedding"], ids)
    return add_positions(tokens) if cfg.positional else tokens


def _sentence_vectors(params, name, sentences, cfg, rng):
    # equal-length sentences run through T together; rows come back in input order
    groups = defaultdict(list)
    for i, sentence in enumerate(sentences):
        groups[len(sentence)].append(i)
    pooled, order = [], []
    for length in sorted(groups):
        members = groups[length]
        ids = np.array([sentences[i] for i in members], dtype=np.int64)
        out = encoder_block(params, name, TokenSequence(_embed(params, ids, cfg)), cfg.attention(), rng)
        pooled.append(mean_along_axis(out.tokens, axis=-2))
        order.extend(members)
    vectors = pooled[0] if len(pooled) == 1 else concat(pooled, axis=0)
    if order != sorted(order):
        vectors = embedding_lookup(vectors, np.argsort(order))
    return vectors


def encode_level1(params, sample, cfg, rng=None):
    """Return (t_ttl2, t_ing2, t_ins2); the title has no HT stage."""
    sample.validate(cfg.vocab_size)
    title_ids = np.array(sample.title, dtype=np.int64)
    t_ttl = encoder_block(params, "recipe.T.title", TokenSequence(_embed(params, title_ids, cfg)), cfg.attention(), rng)

    entities = []
    for entity, sentences in (("ingredients", sample.ingredients), ("instructions", sample.instructions)):
        vectors = _sentence_vectors(params, f"recipe.T.{entity}", sentences, cfg, rng)
        if cfg.positional:
            vectors = add_positions(vectors)
        entities.append(encoder_block(params, f"recipe.HT.{entity}", TokenSequence(vectors), cfg.attention(), rng))
    return t_ttl, entities[0], entities[1]


# ==============================
#  Level 2: HTD
# ==============================
def _join(*sequences):
    return TokenSequence(concat([s.tokens for s in sequences], axis=-2))


def encode_htd(params, t_ttl2, t_ing2, t_ins2, cfg, rng=None):
    if not cfg.use_htd:
        t_ttl3, t_ing3, t_ins3 = t_ttl2, t_ing2, t_ins2
    else:
        attention = cfg.htd_attention()
        kv_title = _join(t_ing2, t_ins2)
        if cfg.htd_variant == "v2":
            kv_ing, kv_ins = t_ins2, t_ing2
        else:
            kv_ing, kv_ins = _join(t_ttl2, t_ins2), _join(t_ttl2, t_ing2)
        t_ttl3 = decoder_block(params, _htd_name(cfg, "title"), t_ttl2, kv_title, attention, rng)
        t_ing3 = decoder_block(params, _htd_name(cfg, "ingredients"), t_ing2, kv_ing, attention, rng)
        t_ins3 = decoder_block(params, _htd_name(cfg, "instructions"), t_ins2, kv_ins, attention, rng)
    return RecipeTokens(t_ttl3, t_ing3, t_ins3, _join(t_ttl3, t_ing3, t_ins3))


def pool_recipe(params, tokens, cfg):
    """e_R = normalize(W [mean(t_ttl3); mean(t_ing3); mean(t_ins3)])."""
    pooled = concat([mean_along_axis(t.tokens, axis=-2) for t in (tokens.t_ttl, tokens.t_ing, tokens.t_ins)], axis=-1)
    projected = linear(params, "recipe.projection", reshape(pooled, (1, 3 * cfg.model_dim)))
    tokens.e_R = reshape(l2_normalize_rows(projected), (cfg.embed_dim,))
    return tokens.e_R


def encode_recipe(params, sample, cfg, rng=None):
    tokens = encode_htd(params, *encode_level1(params, sample, cfg, rng), cfg, rng)
    pool_recipe(params, tokens, cfg)
    return tokens


def encode_recipes(params, samples, cfg, rng=None):
    """Encode a batch; returns (list of RecipeTokens, E_R [B, embed_dim])."""
    encoded = [encode_recipe(params, sample, cfg, rng) for sample in samples]
    E_R = concat([reshape(t.e_R, (1, cfg.embed_dim)) for t in encoded], axis=0)
    return encoded, E_R
