"""
Training-only multimodal regularization.

ITEM enhances the image tokens by letting them attend to the recipe tokens;
MTD lets the recipe tokens attend to the enhanced image tokens and pools
them into one match logit per (recipe, image) pair. The ITM loss is binary
cross-entropy on positives and on the hardest in-batch negatives.
"""
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from modules.errors import ConfigError, InputError
from modules.tensor import (
    Tensor, clip, concat, embedding_lookup, log, mean_along_axis, reshape, sigmoid, slice_axis,
)
from modules.transformer import (
    AttentionConfig, TokenSequence, decoder_block, init_decoder_block, init_linear, linear, stack_sequences,
)

ITEM_KV_MODES = ("all", "title_only", "ingredients_only")


@dataclass(frozen=True)
class MmrConfig:
    enabled: bool = True
    use_item: bool = True
    item_layers: int = 1
    item_heads: int = 4
    mtd_layers: int = 4
    mtd_heads: int = 4
    mmr_dim: int = 64
    ff_dim: int = 128
    dropout_rate: float = 0.1
    item_kv_mode: str = "all"

    def __post_init__(self):
        if self.item_kv_mode not in ITEM_KV_MODES:
            raise ConfigError(f"item_kv_mode must be one of {ITEM_KV_MODES}, got {self.item_kv_mode!r}")
        self.item_attention()
        self.mtd_attention()

    def item_attention(self):
        return AttentionConfig(self.item_heads, self.mmr_dim, self.ff_dim, self.item_layers, self.dropout_rate)

    def mtd_attention(self):
        return AttentionConfig(self.mtd_heads, self.mmr_dim, self.ff_dim, self.mtd_layers, self.dropout_rate)


@dataclass
class MatchScore:
    logit: Tensor
    probability: Tensor


def init_mmr(rng, params, cfg, recipe_dim, image_dim):
    init_linear(rng, params, "mmr.recipe_projection", recipe_dim, cfg.mmr_dim)
    init_linear(rng, params, "mmr.image_projection", image_dim, cfg.mmr_dim)
    if cfg.use_item:
        init_decoder_block(rng, params, "mmr.item", cfg.item_attention())
    init_decoder_block(rng, params, "mmr.mtd", cfg.mtd_attention())
    init_linear(rng, params, "mmr.head", cfg.mmr_dim, 1)


# ==============================
#  ITEM / MTD
# ==============================
def project_to_mmr(params, t_R, t_I):
    return (
        TokenSequence(linear(params, "mmr.recipe_projection", t_R.tokens)),
        TokenSequence(linear(params, "mmr.image_projection", t_I.tokens)),
    )


def select_item_kv(t_R, spans, mode):
    """Recipe tokens ITEM attends to: all of them, the title, or the ingredients."""
    title_len, ingredient_len, _ = spans
    if mode == "title_only":
        return TokenSequence(slice_axis(t_R.tokens, 0, title_len, axis=-2))
    if mode == "ingredients_only":
        return TokenSequence(slice_axis(t_R.tokens, title_len, title_len + ingredient_len, axis=-2))
    return t_R


def item_enhance(params, t_I, t_R_kv, cfg, rng=None):
    if not cfg.use_item:
        return t_I
    return decoder_block(params, "mmr.item", t_I, t_R_kv, cfg.item_attention(), rng)


def mtd_score(params, t_R, t_I_hat, cfg, rng=None):
    out = decoder_block(params, "mmr.mtd", t_R, t_I_hat, cfg.mtd_attention(), rng)
    pooled = mean_along_axis(out.tokens, axis=-2)
    logit = linear(params, "mmr.head", reshape(pooled, (-1, cfg.mmr_dim)))
    logit = reshape(logit, pooled.shape[:-1])
    return MatchScore(logit, sigmoid(logit))


def score_pairs(params, recipes, t_I, pairs, cfg, rng=None):
    """
    Match scores for (recipe index, image index) pairs.

    `recipes` is a list of RecipeTokens and `t_I` the image tokens
    [B, N_I, d] of the same batch. Pairs whose recipes share entity lengths
    are scored together; scores come back in `pairs` order.
    """
    buckets = defaultdict(list)
    for p, (r, _) in enumerate(pairs):
        buckets[recipes[r].spans].append(p)

    logits, order = [], []
    for spans, members in buckets.items():
        recipe_tokens = stack_sequences([recipes[pairs[p][0]].t_R for p in members])
        image_tokens = TokenSequence(embedding_lookup(t_I.tokens, np.array([pairs[p][1] for p in members])))
        t_R_mmr, t_I_mmr = project_to_mmr(params, recipe_tokens, image_tokens)
        enhanced = item_enhance(params, t_I_mmr, select_item_kv(t_R_mmr, spans, cfg.item_kv_mode), cfg, rng)
        logits.append(mtd_score(params, t_R_mmr, enhanced, cfg, rng).logit)
        order.extend(members)

    logit = logits[0] if len(logits) == 1 else concat(logits, axis=0)
    if order != sorted(order):
        logit = embedding_lookup(logit, np.argsort(order))
    return MatchScore(logit, sigmoid(logit))


# ==============================
#  Hard negatives and ITM loss
# ==============================
def select_hard_negatives(E_r, E_v):
    """
    Hardest in-batch negatives by cosine similarity.

    neg_recipe_idx[i] is the recipe j != i most similar to image i;
    neg_image_idx[i] the image j != i most similar to recipe i. Ties go to
    the lowest index.
    """
    E_r = E_r.data if isinstance(E_r, Tensor) else np.asarray(E_r)
    E_v = E_v.data if isinstance(E_v, Tensor) else np.asarray(E_v)
    batch = E_r.shape[0]
    if batch < 2:
        raise InputError(f"hard-negative selection needs a batch of at least 2, got {batch}")
    image_to_recipe = E_v @ E_r.T
    recipe_to_image = E_r @ E_v.T
    np.fill_diagonal(image_to_recipe, -np.inf)
    np.fill_diagonal(recipe_to_image, -np.inf)
    return np.argmax(image_to_recipe, axis=1), np.argmax(recipe_to_image, axis=1)


def itm_pairs(neg_recipe_idx, neg_image_idx):
    """B positive pairs and 2B negative pairs as (recipe, image) indices."""
    batch = len(neg_recipe_idx)
    positives = [(i, i) for i in range(batch)]
    negatives = [(int(neg_recipe_idx[i]), i) for i in range(batch)]
    negatives += [(i, int(neg_image_idx[i])) for i in range(batch)]
    return positives, negatives


def itm_loss(pos_scores, neg_scores, eps=1e-7):
    probabilities = clip(concat([pos_scores.probability, neg_scores.probability], axis=0), eps, 1.0 - eps)
    labels = np.concatenate([np.ones(pos_scores.probability.shape[0]), np.zeros(neg_scores.probability.shape[0])])
    likelihood = log(probabilities) * Tensor(labels) + log(1.0 - probabilities) * Tensor(1.0 - labels)
    return -mean_along_axis(likelihood)
