"""
Layered configuration: dataclass defaults < config.yaml < environment <
command-line overrides. Each YAML section maps onto one config dataclass
and every field is addressable as section.key (train.margin.kind).
"""
import logging
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace

import yaml

from modules.checkpoint import plain
from modules.corpus import CorpusSpec
from modules.errors import ConfigError
from modules.image_encoder import ImageConfig
from modules.losses import MARGIN_KINDS, MarginPolicy
from modules.mmr import MmrConfig
from modules.model import ModelConfig
from modules.recipe_encoder import RecipeConfig
from modules.retrieval import EvalConfig
from modules.training import TrainConfig

DEFAULT_CONFIG = "config.yaml"
SEED_ENV = "TFOOD_SEED"

VARIANTS = (
    "full", "no-htd", "htd-v2", "htd-separate", "no-mmr", "no-item", "item-a", "item-t", "item-n",
    "no-adamine", "mtd-layers=N", "margin={fixed,inc,ada}",
)


@dataclass(frozen=True)
class Settings:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    mmr: MmrConfig = field(default_factory=MmrConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = {f.name: f.default_factory for f in fields(Settings)}
NESTED = {(TrainConfig, "margin"): MarginPolicy}


# ==============================
#  Merging
# ==============================
def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(section, f, value):
    default = _default(f)
    key = f"{section}.{f.name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif isinstance(default, float):
        # YAML 1.1 reads exponents without a dot ("1e-5") as strings
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key} expects a number, got {value!r}") from None
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
    elif isinstance(default, tuple):
        value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
    return value


def _merge_dataclass(section, current, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping, got {values!r}")
    known = {f.name: f for f in fields(current)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    updates = {}
    for name, value in values.items():
        nested = NESTED.get((type(current), name))
        if nested is not None:
            updates[name] = _merge_dataclass(f"{section}.{name}", getattr(current, name), value)
        else:
            updates[name] = _coerce(section, known[name], value)
    try:
        return replace(current, **updates)
    except TypeError as e:
        raise ConfigError(f"invalid values for {section}: {e}")


def merge_settings(settings, data):
    if not data:
        return settings
    if not isinstance(data, dict):
        raise ConfigError(f"configuration must be a mapping of sections, got {type(data).__name__}")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    updates = {section: _merge_dataclass(section, getattr(settings, section), values)
               for section, values in data.items() if values is not None}
    return replace(settings, **updates)


def parse_overrides(items):
    """["train.epochs=5", "train.margin.kind=ada"] -> nested mapping with YAML-typed values."""
    data = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 2 or not all(parts):
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value of {key}: {e}")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} conflicts with an earlier value for {part}")
        node[parts[-1]] = value
    return data


# ==============================
#  Loading
# ==============================
def load_settings(file_path=DEFAULT_CONFIG, overrides=(), env=None):
    """
    Resolve the configuration. The default config.yaml is optional; an
    explicitly named file must exist. TFOOD_SEED sets every seed.
    """
    env = os.environ if env is None else env
    settings = Settings()
    if file_path and os.path.exists(file_path):
        with open(file_path, "r") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {file_path}: {e}")
        settings = merge_settings(settings, data)
        logging.info(f"Loaded configuration from {file_path}")
    elif file_path and file_path != DEFAULT_CONFIG:
        raise ConfigError(f"config file {file_path} not found")

    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}")
        settings = merge_settings(settings, {"corpus": {"seed": seed}, "train": {"seed": seed}, "eval": {"seed": seed}})

    return merge_settings(settings, parse_overrides(overrides))


def settings_to_dict(settings):
    return {section: plain(asdict(getattr(settings, section))) for section in SECTIONS}


def settings_from_dict(data):
    return merge_settings(Settings(), data)


def model_config(settings):
    return ModelConfig(recipe=settings.recipe, image=settings.image, mmr=settings.mmr)


# ==============================
#  Ablation variants
# ==============================
def apply_variant(settings, variant):
    """Settings for one ablation variant name (see VARIANTS)."""
    name, _, arg = variant.partition("=")
    if name == "full" and not arg:
        return settings
    if name == "no-htd":
        return replace(settings, recipe=replace(settings.recipe, use_htd=False))
    if name == "htd-v2":
        return replace(settings, recipe=replace(settings.recipe, htd_variant="v2"))
    if name == "htd-separate":
        return replace(settings, recipe=replace(settings.recipe, htd_shared=False))
    if name == "no-mmr":
        return replace(settings, mmr=replace(settings.mmr, enabled=False), train=replace(settings.train, lambda_itm=0.0))
    if name == "no-item":
        return replace(settings, mmr=replace(settings.mmr, use_item=False))
    if name in ("item-a", "item-t", "item-n"):
        mode = {"item-a": "all", "item-t": "title_only", "item-n": "ingredients_only"}[name]
        return replace(settings, mmr=replace(settings.mmr, use_item=True, item_kv_mode=mode))
    if name == "no-adamine":
        return replace(settings, train=replace(settings.train, adamine=False))
    if name == "mtd-layers":
        try:
            layers = int(arg)
        except ValueError:
            raise ConfigError(f"mtd-layers needs an integer, got {arg!r}")
        return replace(settings, mmr=replace(settings.mmr, mtd_layers=layers))
    if name == "margin":
        if arg not in MARGIN_KINDS:
            raise ConfigError(f"margin variant must be one of {MARGIN_KINDS}, got {arg!r}")
        policy = replace(settings.train.margin, kind=arg)
        return replace(settings, train=replace(settings.train, margin=policy))
    raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
