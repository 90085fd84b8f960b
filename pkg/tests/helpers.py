import numpy as np

from modules.corpus import CorpusSpec
from modules.image_encoder import ImageConfig, ImageSample
from modules.mmr import MmrConfig
from modules.model import ModelConfig
from modules.recipe_encoder import RecipeConfig, RecipeSample
from modules.tensor import Tensor, mul, sum_along_axis

TINY_CORPUS = CorpusSpec(
    num_pairs=40, num_classes=4, num_ingredient_words=12, noise_level=0.1, seed=0, image_size=8, patch_size=4,
)

# same sizes as config sections, for yaml/--set based tests
TINY_SETTINGS = {
    "corpus": {"num_pairs": 40, "num_classes": 4, "num_ingredient_words": 12, "image_size": 8, "patch_size": 4},
    "recipe": {"model_dim": 8, "embed_dim": 8, "num_heads": 2, "num_layers": 1, "htd_layers": 1, "ff_dim": 16,
               "dropout_rate": 0.0},
    "image": {"image_size": 8, "patch_size": 4, "model_dim": 8, "embed_dim": 8, "num_heads": 2, "num_layers": 1,
              "ff_dim": 16, "dropout_rate": 0.0},
    "mmr": {"item_heads": 2, "mtd_heads": 2, "mtd_layers": 1, "mmr_dim": 8, "ff_dim": 16, "dropout_rate": 0.0},
    "train": {"epochs": 2, "batch_size": 8, "freeze_image_epochs": 1},
    "eval": {"bag_size": 8, "num_bags": 2},
}


def tiny_recipe_config(**overrides):
    values = dict(vocab_size=20, model_dim=8, embed_dim=8, num_heads=2, num_layers=1, htd_layers=1,
                  ff_dim=16, dropout_rate=0.0)
    values.update(overrides)
    return RecipeConfig(**values)


def tiny_image_config(**overrides):
    values = dict(image_size=8, patch_size=4, model_dim=8, embed_dim=8, num_heads=2, num_layers=1,
                  ff_dim=16, dropout_rate=0.0)
    values.update(overrides)
    return ImageConfig(**values)


def tiny_mmr_config(**overrides):
    values = dict(item_heads=2, mtd_heads=2, item_layers=1, mtd_layers=1, mmr_dim=8, ff_dim=16, dropout_rate=0.0)
    values.update(overrides)
    return MmrConfig(**values)


def tiny_model_config(recipe=None, image=None, mmr=None):
    return ModelConfig(
        recipe=recipe or tiny_recipe_config(),
        image=image or tiny_image_config(),
        mmr=mmr or tiny_mmr_config(),
    )


def random_recipe(rng, vocab_size=20, ingredients=2, instructions=3, title_len=3, class_label=None):
    def sentence():
        return rng.integers(2, vocab_size, int(rng.integers(2, 5))).tolist()

    return RecipeSample(
        title=rng.integers(2, vocab_size, title_len).tolist(),
        ingredients=[sentence() for _ in range(ingredients)],
        instructions=[sentence() for _ in range(instructions)],
        class_label=class_label,
    )


def random_image(rng, cfg):
    return ImageSample(rng.uniform(0.0, 1.0, (cfg.image_size, cfg.image_size, cfg.channels)))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def weighted_sum(out, seed=99):
    """Scalar sum(out * w) with fixed random w, so every output entry has its own gradient weight."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return sum_along_axis(mul(out, Tensor(w)))
