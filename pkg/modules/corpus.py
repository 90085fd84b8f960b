"""
Synthetic paired recipe/image corpus.

Each pair comes from a latent dish (class, ordered ingredient subset). The
recipe text is templated from the latent and the image is a grid of flat
colour patches: the first patch column carries the class colour and the
remaining patches cycle through the ingredient colours, plus uniform noise.

On disk a corpus directory holds
    corpus.yaml   spec snapshot and raster shape
    index.csv     one record per pair: pair_id, class_label, split, offsets
    recipes.txt   "=== <id>" delimited entity blocks
    images.bin    float64 rasters, row-major, back to back
"""
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import yaml

from modules.errors import ConfigError, FormatError
from modules.image_encoder import ImageSample
from modules.recipe_encoder import RecipeSample

CORPUS_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

CLASS_WORDS = [
    "salad", "soup", "curry", "pasta", "stew", "pie", "bread", "cake",
    "tart", "risotto", "omelette", "noodles",
]
INGREDIENT_WORDS = [
    "tomato", "onion", "garlic", "carrot", "potato", "rice", "chicken", "beef",
    "pork", "tofu", "spinach", "pepper", "mushroom", "cheese", "butter", "egg",
    "lemon", "basil", "ginger", "bean", "corn", "pea", "apple", "flour",
    "sugar", "milk", "cream", "salmon", "shrimp", "lentil", "zucchini", "eggplant",
    "cabbage", "celery", "leek", "olive", "honey", "yogurt", "chili", "coconut",
]
ADJECTIVES = ["homemade", "quick", "classic", "rustic", "spicy", "simple"]
UNITS = ["cups", "spoons", "grams", "pieces"]
VERBS = ["stir", "whisk", "fold", "toss", "simmer", "roast"]


@dataclass(frozen=True)
class CorpusSpec:
    num_pairs: int = 512
    num_classes: int = 8
    num_ingredient_words: int = 32
    noise_level: float = 0.1
    seed: int = 0
    min_ingredients: int = 2
    max_ingredients: int = 5
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    image_size: int = 32
    patch_size: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.num_pairs < self.num_classes:
            raise ConfigError(f"num_pairs {self.num_pairs} cannot cover {self.num_classes} classes")
        if not 1 <= self.min_ingredients <= self.max_ingredients <= self.num_ingredient_words:
            raise ConfigError(
                f"need 1 <= min_ingredients <= max_ingredients <= num_ingredient_words, got "
                f"{self.min_ingredients}, {self.max_ingredients}, {self.num_ingredient_words}"
            )
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must lie in [0, 1], got {self.noise_level}")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1.0:
            raise ConfigError("val_fraction and test_fraction must be nonnegative and leave a training split")
        if self.image_size % self.patch_size or self.image_size // self.patch_size < 2:
            raise ConfigError(f"image_size {self.image_size} must hold at least 2x2 patches of {self.patch_size}")


@dataclass(frozen=True)
class Dish:
    class_label: int
    ingredients: tuple


@dataclass
class ParsedRecipe:
    title: str
    ingredients: list = field(default_factory=list)
    instructions: list = field(default_factory=list)


# ==============================
#  Generation
# ==============================
def _names(words, fallback, count):
    return [words[i] if i < len(words) else f"{fallback}{i}" for i in range(count)]


def render_image(dish, ingredient_colors, class_colors, spec, rng):
    size, patch = spec.image_size, spec.patch_size
    grid = size // patch
    image = np.empty((size, size, 3))
    for r in range(grid):
        for c in range(grid):
            if c == 0:
                color = class_colors[dish.class_label]
            else:
                slot = r * (grid - 1) + c - 1
                color = ingredient_colors[dish.ingredients[slot % len(dish.ingredients)]]
            image[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = color
    noise = rng.uniform(-spec.noise_level, spec.noise_level, image.shape)
    return np.clip(image + noise, 0.0, 1.0)


def recipe_text(pair_id, dish, class_names, ingredient_names, rng):
    dish_name = class_names[dish.class_label]
    names = [ingredient_names[i] for i in dish.ingredients]
    lines = [f"=== {pair_id}", f"title: {rng.choice(ADJECTIVES)} {dish_name} with {names[0]}"]
    lines += [f"ingredient: {rng.integers(1, 5)} {rng.choice(UNITS)} of {name}" for name in names]
    lines += [f"instruction: add the {name} and {rng.choice(VERBS)} well" for name in names]
    lines.append(f"instruction: serve the {dish_name} warm")
    return "\n".join(lines) + "\n"


def _split_labels(spec, rng):
    n_test = int(round(spec.num_pairs * spec.test_fraction))
    n_val = int(round(spec.num_pairs * spec.val_fraction))
    labels = np.array(["train"] * spec.num_pairs, dtype=object)
    order = rng.permutation(spec.num_pairs)
    labels[order[:n_test]] = "test"
    labels[order[n_test:n_test + n_val]] = "val"
    return labels


def generate_corpus(spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    class_names = _names(CLASS_WORDS, "dish", spec.num_classes)
    ingredient_names = _names(INGREDIENT_WORDS, "item", spec.num_ingredient_words)

    # each class draws mostly from its own ingredient pool so class and content correlate
    pool_size = min(spec.num_ingredient_words, max(spec.max_ingredients + 2, 2 * spec.num_ingredient_words // spec.num_classes))
    pools = [rng.choice(spec.num_ingredient_words, pool_size, replace=False) for _ in range(spec.num_classes)]
    ingredient_colors = rng.uniform(0.05, 0.95, (spec.num_ingredient_words, 3))
    class_colors = rng.uniform(0.05, 0.95, (spec.num_classes, 3))

    classes = np.resize(np.arange(spec.num_classes), spec.num_pairs)
    rng.shuffle(classes)
    splits = _split_labels(spec, rng)

    text_path = os.path.join(out_dir, "recipes.txt")
    image_path = os.path.join(out_dir, "images.bin")
    rows = []
    text_offset = image_offset = 0
    with open(text_path, "wb") as text_file, open(image_path, "wb") as image_file:
        for pair_id in range(spec.num_pairs):
            label = int(classes[pair_id])
            count = int(rng.integers(spec.min_ingredients, spec.max_ingredients + 1))
            dish = Dish(label, tuple(int(i) for i in rng.choice(pools[label], count, replace=False)))

            block = recipe_text(pair_id, dish, class_names, ingredient_names, rng).encode("utf-8")
            raster = render_image(dish, ingredient_colors, class_colors, spec, rng).astype("<f8").tobytes()
            text_file.write(block)
            image_file.write(raster)
            rows.append({
                "pair_id": pair_id, "class_label": label, "split": splits[pair_id],
                "text_offset": text_offset, "text_length": len(block), "image_offset": image_offset,
            })
            text_offset += len(block)
            image_offset += len(raster)

    index_path = os.path.join(out_dir, "index.csv")
    pd.DataFrame(rows).to_csv(index_path, index=False)
    meta_path = os.path.join(out_dir, "corpus.yaml")
    with open(meta_path, "w") as f:
        yaml.safe_dump({
            "format_version": CORPUS_FORMAT_VERSION,
            "spec": asdict(spec),
            "image_shape": [spec.image_size, spec.image_size, 3],
            "class_names": class_names,
        }, f, sort_keys=False)

    counts = pd.Series(classes).value_counts()
    logging.info(f"Exported {spec.num_pairs} pairs ({spec.num_classes} classes, {counts.min()}-{counts.max()} per class) to {out_dir}")
    return {"index": index_path, "recipes": text_path, "images": image_path, "meta": meta_path}


# ==============================
#  Vocabulary
# ==============================
PAD_TOKEN, OOV_TOKEN = "<pad>", "<unk>"
OOV_ID = 1


def tokenize(sentence):
    return sentence.lower().split()


@dataclass
class Vocabulary:
    """Word-level vocabulary; id 0 is reserved and never emitted, id 1 is out-of-vocabulary."""

    words: list

    def __post_init__(self):
        self._ids = {word: i for i, word in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, sentence, max_len=None):
        ids = [self._ids.get(token, OOV_ID) for token in tokenize(sentence)]
        return ids[:max_len] if max_len is not None else ids


def build_vocabulary(recipes):
    found = set()
    for recipe in recipes:
        for sentence in [recipe.title, *recipe.ingredients, *recipe.instructions]:
            found.update(tokenize(sentence))
    return Vocabulary([PAD_TOKEN, OOV_TOKEN, *sorted(found)])


# ==============================
#  Loading
# ==============================
def parse_recipe_block(block, offset=0):
    lines = block.splitlines()
    if not lines or not lines[0].startswith("=== "):
        raise FormatError("recipe block does not start with a '=== <id>' header", offset)
    recipe = ParsedRecipe(title="")
    position = offset + len(lines[0]) + 1
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"unrecognised recipe line {line!r}", position)
        if key == "title":
            recipe.title = value
        elif key == "ingredient":
            recipe.ingredients.append(value)
        elif key == "instruction":
            recipe.instructions.append(value)
        else:
            raise FormatError(f"unknown recipe entity {key!r}", position)
        position += len(line.encode("utf-8")) + 1
    return recipe


@dataclass
class Corpus:
    spec: CorpusSpec
    index: pd.DataFrame
    recipes: list
    images: np.ndarray

    def rows(self, split=None):
        if split is None:
            return np.arange(len(self.index))
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        return np.flatnonzero(self.index["split"].to_numpy() == split)

    def samples(self, split, vocab, recipe_cfg):
        """(RecipeSample list, ImageSample list, pair ids) for one split."""
        rows = self.rows(split)
        recipes, images = [], []
        for row in rows:
            parsed = self.recipes[row]
            sample = RecipeSample(
                title=vocab.encode(parsed.title),
                ingredients=[vocab.encode(s) for s in parsed.ingredients],
                instructions=[vocab.encode(s) for s in parsed.instructions],
                class_label=int(self.index["class_label"].iat[row]),
            )
            recipes.append(sample.truncated(recipe_cfg))
            images.append(ImageSample(self.images[row]))
        return recipes, images, self.index["pair_id"].to_numpy()[rows]


def load_corpus(corpus_dir):
    meta_path = os.path.join(corpus_dir, "corpus.yaml")
    if not os.path.exists(meta_path):
        raise FormatError(f"no corpus.yaml in {corpus_dir}")
    with open(meta_path, "r") as f:
        meta = yaml.safe_load(f) or {}
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise FormatError(f"unsupported corpus format version {meta.get('format_version')!r}")
    spec = CorpusSpec(**meta["spec"])
    index = pd.read_csv(os.path.join(corpus_dir, "index.csv"))

    with open(os.path.join(corpus_dir, "recipes.txt"), "rb") as f:
        text = f.read()
    recipes = []
    for offset, length in zip(index["text_offset"], index["text_length"]):
        if offset + length > len(text):
            raise FormatError(f"recipe block of {length} bytes runs past the end of recipes.txt", int(offset))
        recipes.append(parse_recipe_block(text[offset:offset + length].decode("utf-8"), int(offset)))

    shape = tuple(meta["image_shape"])
    raster = np.fromfile(os.path.join(corpus_dir, "images.bin"), dtype="<f8")
    expected = len(index) * int(np.prod(shape))
    if raster.size != expected:
        raise FormatError(f"images.bin holds {raster.size} values, expected {expected}", raster.size * 8)
    images = raster.reshape(len(index), *shape)
    images = images[(index["image_offset"].to_numpy() // (8 * int(np.prod(shape))))]

    logging.info(f"Loaded {len(index)} pairs from {corpus_dir}")
    return Corpus(spec, index, recipes, images)
