"""
Miniature patch-token vision transformer.

Images are cut into non-overlapping P x P patches, linearly embedded, a
learned CLS token is prepended, and the sequence runs through encoder
blocks. Non-CLS outputs are the image tokens t_I; the projected CLS output
is the image embedding e_I.
"""
from dataclasses import dataclass

import numpy as np

from modules.errors import ConfigError, InputError
from modules.tensor import Tensor, add, concat, l2_normalize_rows, reshape, slice_axis
from modules.transformer import (
    AttentionConfig, TokenSequence, add_positions, encoder_block, init_encoder_block, init_linear, linear,
)


@dataclass(frozen=True)
class ImageConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    model_dim: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ff_dim: int = 128
    dropout_rate: float = 0.1
    positional: bool = True

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        self.attention()

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def attention(self):
        return AttentionConfig(self.num_heads, self.model_dim, self.ff_dim, self.num_layers, self.dropout_rate)


@dataclass
class ImageSample:
    pixels: np.ndarray

    def validate(self, cfg):
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if self.pixels.shape != expected:
            raise InputError(f"image must have shape {expected}, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InputError("image pixels must lie in [0, 1]")


@dataclass
class ImageTokens:
    t_I: TokenSequence
    e_I: Tensor


def init_image_encoder(rng, params, cfg):
    d = cfg.model_dim
    init_linear(rng, params, "image.patch_embedding", cfg.patch_dim, d)
    params["image.cls_token"] = Tensor(rng.normal(0.0, 0.02, (1, d)), requires_grad=True)
    init_encoder_block(rng, params, "image.encoder", cfg.attention())
    init_linear(rng, params, "image.projection", d, cfg.embed_dim)


def patchify(img, patch_size):
    """Row-major non-overlapping patches, each flattened to P*P*C values."""
    height, width, channels = img.pixels.shape
    if height % patch_size or width % patch_size:
        raise InputError(f"image of size {height}x{width} is not divisible by patch size {patch_size}")
    rows, cols = height // patch_size, width // patch_size
    patches = img.pixels.reshape(rows, patch_size, cols, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return TokenSequence(Tensor(patches.reshape(rows * cols, patch_size * patch_size * channels)))


def encode_images(params, images, cfg, rng=None):
    """Encode a batch; returns (t_I [B, N_I, d], E_I [B, embed_dim])."""
    for img in images:
        img.validate(cfg)
    batch = len(images)
    patches = Tensor(np.stack([patchify(img, cfg.patch_size).tokens.data for img in images]))
    tokens = linear(params, "image.patch_embedding", patches)

    d = cfg.model_dim
    cls = add(reshape(params["image.cls_token"], (1, 1, d)), Tensor(np.zeros((batch, 1, d))))
    x = concat([cls, tokens], axis=1)
    if cfg.positional:
        x = add_positions(x)

    out = encoder_block(params, "image.encoder", TokenSequence(x), cfg.attention(), rng).tokens
    cls_out = reshape(slice_axis(out, 0, 1, axis=1), (batch, d))
    t_I = TokenSequence(slice_axis(out, 1, cfg.num_patches + 1, axis=1))
    E_I = l2_normalize_rows(linear(params, "image.projection", cls_out))
    return t_I, E_I


def encode_image(params, img, cfg, rng=None):
    t_I, E_I = encode_images(params, [img], cfg, rng)
    return ImageTokens(
        TokenSequence(reshape(t_I.tokens, (cfg.num_patches, cfg.model_dim))),
        reshape(E_I, (cfg.embed_dim,)),
    )
