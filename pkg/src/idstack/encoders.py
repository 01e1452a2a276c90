"""Per-image ID embeddings, class-word-located text embeddings and the fusion perceptron."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .adapters import DEFAULT_CLASS_VOCAB, AdapterSet
from .imaging import rng_for, to_float_image


class InputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class IDImage:
    """Input identity image; ``mask`` is True on the body region to keep."""

    pixels: np.ndarray
    mask: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.pixels = to_float_image(self.pixels)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.pixels.shape[:2]:
            raise InputError(f"mask shape {self.mask.shape} does not match image {self.pixels.shape[:2]}")


@dataclass
class TextEmbedding:
    matrix: np.ndarray
    token_strings: list[str]
    class_span: tuple[int, int] | None
    class_word: str | None = None

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    def class_vector(self) -> np.ndarray:
        if self.class_span is None:
            raise InputError("text embedding has no class span")
        a, b = self.class_span
        return self.matrix[a:b].mean(axis=0)


def noise_background(image: IDImage, seed: int) -> np.ndarray:
    """Replace every pixel outside the mask with uniform noise drawn from ``seed``."""
    if not image.mask.any():
        raise InputError("ID mask selects no pixels")
    noise = rng_for("background-noise", seed).random(image.pixels.shape)
    return np.where(image.mask[..., None], image.pixels, noise)


class FusionMLP(nn.Module):
    """Two linear layers over [image embedding; class vector] with a GELU between."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.layer1 = nn.Linear(2 * dim, hidden)
        self.layer2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def forward(self, e, class_vector):
        return self.layer2(self.act(self.layer1(torch.cat([e, class_vector], dim=-1))))


class IDEncoder(nn.Module):
    """Trainable parts of the image branch: tunable final encoder block, projection, fusion."""

    def __init__(self, feat_dim: int, embed_dim: int, fusion_hidden: int | None = None):
        super().__init__()
        self.feat_dim = feat_dim
        self.embed_dim = embed_dim
        self.tunable = nn.Linear(feat_dim, feat_dim)
        self.projection = nn.Linear(feat_dim, embed_dim)
        self.fusion = FusionMLP(embed_dim, fusion_hidden)
        with torch.no_grad():
            self.tunable.weight.copy_(torch.eye(feat_dim))
            self.tunable.bias.zero_()


def encode_id_image(
    image: IDImage,
    adapters: AdapterSet,
    projection: nn.Linear,
    seed: int,
    tunable: nn.Module | None = None,
) -> torch.Tensor:
    """projection(encoder(noise_background(image))) as a D-vector."""
    if projection.in_features != adapters.image_encoder.dim:
        raise ConfigurationError(
            f"projection expects {projection.in_features} features but the image encoder gives {adapters.image_encoder.dim}"
        )
    raw = adapters.image_encoder.encode_image(noise_background(image, seed), image.mask)
    x = torch.as_tensor(raw, dtype=projection.weight.dtype)
    if tunable is not None:
        x = tunable(x)
    return projection(x)


def encode_id_images(images: Sequence[IDImage], adapters: AdapterSet, encoder: IDEncoder, seed: int) -> torch.Tensor:
    """Batched version of :func:`encode_id_image` through ``encoder``; returns N x D."""
    feats = np.stack(
        [adapters.image_encoder.encode_image(noise_background(im, seed + i), im.mask) for i, im in enumerate(images)]
    )
    if feats.shape[1] != encoder.feat_dim:
        raise ConfigurationError(f"encoder expects {encoder.feat_dim} features, adapter gives {feats.shape[1]}")
    x = torch.as_tensor(feats, dtype=encoder.projection.weight.dtype)
    return encoder.projection(encoder.tunable(x))


def fuse_with_class_vector(e: torch.Tensor, class_vector, weights: FusionMLP) -> torch.Tensor:
    class_vector = torch.as_tensor(class_vector, dtype=e.dtype)
    dim = weights.layer2.out_features
    if e.shape[-1] != dim or class_vector.shape[-1] != dim:
        raise InputError(f"fusion expects {dim}-vectors, got {e.shape[-1]} and {class_vector.shape[-1]}")
    return weights(e, class_vector.expand_as(e))


def encode_text_with_class_span(
    prompt: str, class_vocabulary: Sequence[str] = DEFAULT_CLASS_VOCAB, adapters: AdapterSet | None = None
) -> TextEmbedding:
    """Encode a generation prompt that names exactly one class word, exactly once."""
    mat, toks, _ = adapters.text_encoder.encode(prompt.strip())
    vocab = {w.lower() for w in class_vocabulary}
    hits = [i for i, t in enumerate(toks) if t in vocab]
    if not hits:
        raise InputError(f"prompt {prompt!r} contains no class word from {sorted(vocab)}")
    if len(hits) > 1:
        words = sorted({toks[i] for i in hits})
        raise InputError(f"prompt {prompt!r} has ambiguous class words {words}")
    i = hits[0]
    return TextEmbedding(mat, toks, (i, i + 1), toks[i])


def encode_text_at_char_span(caption: str, char_span: Sequence[int], adapters: AdapterSet) -> TextEmbedding:
    """Encode a caption whose class word is given as a character range (dataset captions)."""
    mat, toks, offs = adapters.text_encoder.encode(caption)
    a, b = char_span
    idx = [i for i, (s, e) in enumerate(offs) if e > s and s >= a and e <= b]
    if not idx:
        raise InputError(f"class span {tuple(char_span)} of {caption!r} maps to no token (truncated?)")
    return TextEmbedding(mat, toks, (idx[0], idx[-1] + 1), caption[a:b].lower())


def encode_null_text(adapters: AdapterSet) -> TextEmbedding:
    mat, toks, _ = adapters.text_encoder.encode("")
    return TextEmbedding(mat, toks, None)
