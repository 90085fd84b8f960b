"""
Model assembly: parameter initialisation for both encoders and the MMR
block, freezing by name prefix, and eval-mode embedding of whole splits.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from modules.errors import ConfigError
from modules.image_encoder import ImageConfig, encode_images, init_image_encoder
from modules.mmr import MmrConfig, init_mmr, score_pairs
from modules.recipe_encoder import RecipeConfig, encode_recipes, init_recipe_encoder
from modules.tensor import no_grad

IMAGE_PREFIX = "image."


@dataclass(frozen=True)
class ModelConfig:
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    mmr: MmrConfig = field(default_factory=MmrConfig)

    def __post_init__(self):
        if self.recipe.embed_dim != self.image.embed_dim:
            raise ConfigError(
                f"recipe and image embeddings must share a dimension, got {self.recipe.embed_dim} and {self.image.embed_dim}"
            )

    def with_vocab(self, vocab_size):
        return replace(self, recipe=replace(self.recipe, vocab_size=vocab_size))


def init_model(cfg, seed):
    rng = np.random.default_rng(seed)
    params = {}
    init_recipe_encoder(rng, params, cfg.recipe)
    init_image_encoder(rng, params, cfg.image)
    if cfg.mmr.enabled:
        init_mmr(rng, params, cfg.mmr, cfg.recipe.model_dim, cfg.image.model_dim)
    count = sum(p.data.size for p in params.values())
    logging.info(f"Initialised {len(params)} parameter tensors ({count} values) with seed {seed}")
    return params


# ==============================
#  Freezing
# ==============================
def freeze(params, prefix):
    for name, p in params.items():
        if name.startswith(prefix):
            p.requires_grad = False
            p.grad = None


def unfreeze(params, prefix):
    for name, p in params.items():
        if name.startswith(prefix):
            p.requires_grad = True


def parameter_digest(params, prefix=""):
    digest = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            digest.update(name.encode("utf-8"))
            digest.update(params[name].data.tobytes())
    return digest.hexdigest()


# ==============================
#  Eval-mode embedding
# ==============================
def embed_pairs(params, cfg, recipes, images, batch_size=64):
    """Unit-norm (E_R, E_I) numpy matrices for aligned recipe/image lists."""
    recipe_rows, image_rows = [], []
    with no_grad():
        for start in range(0, len(recipes), batch_size):
            _, E_R = encode_recipes(params, recipes[start:start + batch_size], cfg.recipe)
            _, E_I = encode_images(params, images[start:start + batch_size], cfg.image)
            recipe_rows.append(E_R.data)
            image_rows.append(E_I.data)
    return np.concatenate(recipe_rows), np.concatenate(image_rows)


def build_rerank_scorer(params, cfg, recipes, images):
    """
    Scorer for retrieval re-ranking: MTD match probabilities between a query
    and candidate rows of the given recipe/image lists.
    """
    with no_grad():
        recipe_tokens, _ = encode_recipes(params, recipes, cfg.recipe)
        image_tokens, _ = encode_images(params, images, cfg.image)

    def scorer(direction, query_idx, candidates):
        if direction == "image_to_recipe":
            pairs = [(int(c), int(query_idx)) for c in candidates]
        else:
            pairs = [(int(query_idx), int(c)) for c in candidates]
        with no_grad():
            return score_pairs(params, recipe_tokens, image_tokens, pairs, cfg.mmr).probability.data

    return scorer
