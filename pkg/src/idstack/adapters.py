"""Interfaces to the external pretrained models plus deterministic offline mocks.

Every heavy model the method leans on (image/text encoders, face detector and
embedder, panoptic segmenter, captioner, dependency parser, sentence-label
similarity, perceptual distance, FID features, DINO features) sits behind a
small role interface.  The shipped mocks are pure functions of their inputs and
the adapter seed, so the whole package runs offline and byte-reproducibly.

Mock pixel world
----------------
The mocks read a colour code used by :mod:`idstack.synthetic`:

* blue channel >= ``FACE_MARK``   -> face pixels; red/green carry the identity pattern
* blue channel >= ``PERSON_MARK`` -> person pixels (face or body)
* anything darker in blue         -> background

A face's identity lives in its red/green pattern at ``FACE_GRID`` x ``FACE_GRID``
resolution, so the face embedder works from pixels alone and also scores
generated images.
"""

from __future__ import annotations

import importlib
import re
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .imaging import area_resize, orthonormal_columns, rng_for, stable_seed, to_float_image

FACE_MARK = 0.75
PERSON_MARK = 0.45
FACE_GRID = 4

DEFAULT_CLASS_VOCAB = ("man", "woman", "boy", "girl", "person", "lady", "guy", "kid", "child")
PLURALS = {
    "men": "man",
    "women": "woman",
    "boys": "boy",
    "girls": "girl",
    "persons": "person",
    "people": "person",
    "ladies": "lady",
    "guys": "guy",
    "kids": "kid",
    "children": "child",
}

_TOKEN_RE = re.compile(r"<[a-z]+>|\w+|[^\w\s]")


class AdapterError(ValueError):
    """Bad adapter input or configuration."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise AdapterError(f"face box must have positive size, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def clip(self, height: int, width: int) -> "FaceBox":
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        return FaceBox(x0, y0, x1 - x0, y1 - y0, self.confidence)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class FaceEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        n = float(np.linalg.norm(self.vector))
        if abs(n - 1.0) > 1e-6:
            raise AdapterError(f"face embedding must be unit norm, got {n}")


@dataclass
class SegmentMask:
    bitmap: np.ndarray
    class_label: str = "person"


# ---------------------------------------------------------------------------
# Role interfaces


class ImageEncoder(Protocol):
    dim: int

    def encode_image(self, pixels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray: ...

    def encode_text(self, text: str) -> np.ndarray: ...


class TextEncoder(Protocol):
    dim: int
    max_length: int

    def tokenize(self, text: str) -> tuple[list[str], list[tuple[int, int]]]: ...

    def encode(self, text: str) -> tuple[np.ndarray, list[str], list[tuple[int, int]]]: ...


class FaceDetector(Protocol):
    def detect(self, pixels: np.ndarray) -> list[FaceBox]: ...


class FaceEmbedder(Protocol):
    dim: int

    def embed(self, face_pixels: np.ndarray) -> FaceEmbedding: ...


class Segmenter(Protocol):
    def segment(self, pixels: np.ndarray) -> list[SegmentMask]: ...


class Captioner(Protocol):
    def caption(self, image_tag: str, mode: str = "greedy", seed: int = 0) -> str: ...


class DependencyParser(Protocol):
    def segment_by_class_words(self, caption: str, vocabulary: Sequence[str]) -> list[tuple[str, str, tuple[int, int]]]: ...


class LabelSimilarity(Protocol):
    def similarity(self, a: str, b: str) -> float: ...


class PerceptualDistance(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


class FeatureExtractor(Protocol):
    dim: int

    def features(self, pixels: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Mock implementations


@lru_cache(maxsize=64)
def _projection(seed: int, rows: int, cols: int) -> np.ndarray:
    m = np.random.default_rng(seed).standard_normal((rows, cols)) / np.sqrt(cols)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def _isometry(seed: int, rows: int, cols: int) -> np.ndarray:
    m = orthonormal_columns(rows, cols, seed)
    m.setflags(write=False)
    return m


def parse_tag(image_tag: str) -> tuple[str, str]:
    """Split a mock tag ``"identity:variant"``."""
    if not isinstance(image_tag, str) or image_tag.count(":") != 1:
        raise AdapterError(f"malformed image tag {image_tag!r}; expected 'identity:variant'")
    ident, variant = image_tag.split(":")
    if not ident or not variant:
        raise AdapterError(f"malformed image tag {image_tag!r}; expected 'identity:variant'")
    return ident, variant


def identity_base_vector(identity: str, dim: int = 512, seed: int = 0) -> np.ndarray:
    g = rng_for("identity-base", seed, identity).standard_normal(dim)
    return g / np.linalg.norm(g)


def mock_face_embedder(image_tag: str, seed: int, dim: int = 512, noise: float = 0.05) -> FaceEmbedding:
    """Tag-level face embedding: identity base direction plus a small seeded perturbation.

    The perturbation has L2 norm ``noise``, so two variants of one identity stay
    above cosine 0.99 and distinct identities sit near orthogonal (|cos| ~ 1/sqrt(dim)).
    """
    ident, _ = parse_tag(image_tag)
    base = identity_base_vector(ident, dim)
    g = rng_for("identity-variant", seed, image_tag).standard_normal(dim)
    v = base + noise * g / np.linalg.norm(g)
    return FaceEmbedding(v / np.linalg.norm(v))


class MockImageEncoder:
    """CLIP stand-in: linear features of an 8x8 area-pooled image, plus a bag-of-words text tower."""

    grid = 8

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed = seed
        self.dim = dim

    def encode_image(self, pixels, mask=None):
        p = to_float_image(pixels)
        if p.size == 0:
            raise AdapterError("empty image")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != p.shape[:2]:
                raise AdapterError("mask shape does not match image")
            p = np.where(mask[..., None], p, 0.5)
        v = area_resize(p, self.grid, self.grid).ravel() - 0.5
        return _projection(stable_seed("clip-image", self.seed), self.dim, v.size) @ v

    def encode_text(self, text):
        toks = [t for t in _TOKEN_RE.findall(text.lower()) if t.isalnum()]
        if not toks:
            return np.zeros(self.dim)
        return np.sum([rng_for("clip-word", self.seed, t).standard_normal(self.dim) for t in toks], axis=0)

    def clip_score(self, text, pixels, mask=None):
        """CLIPScore convention: 2.5 * max(cos, 0)."""
        a, b = self.encode_text(text), self.encode_image(pixels, mask)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        return 2.5 * max(float(a @ b / (na * nb)), 0.0)


class MockTextEncoder:
    """Word-level tokenizer with BOS/EOS/pad and hashed token vectors plus a small positional term."""

    def __init__(self, seed: int = 0, dim: int = 32, max_length: int = 77):
        self.seed = seed
        self.dim = dim
        self.max_length = max_length

    def tokenize(self, text):
        toks, offs = ["<bos>"], [(0, 0)]
        for m in _TOKEN_RE.finditer(text.lower()):
            toks.append(m.group())
            offs.append(m.span())
        toks = toks[: self.max_length - 1]
        offs = offs[: self.max_length - 1]
        toks.append("<eos>")
        offs.append((len(text), len(text)))
        while len(toks) < self.max_length:
            toks.append("<pad>")
            offs.append((len(text), len(text)))
        return toks, offs

    def _token_vector(self, tok):
        return rng_for("text-token", self.seed, tok).standard_normal(self.dim)

    @lru_cache(maxsize=4)
    def _positions(self, n):
        pos = np.arange(n)[:, None]
        freq = np.exp(-np.log(100.0) * np.arange(self.dim // 2) / max(self.dim // 2, 1))
        pe = np.zeros((n, self.dim))
        pe[:, 0::2][:, : freq.size] = np.sin(pos * freq)
        pe[:, 1::2][:, : freq.size] = np.cos(pos * freq)
        return 0.1 * pe

    def encode(self, text):
        toks, offs = self.tokenize(text)
        mat = np.stack([self._token_vector(t) for t in toks]) + self._positions(len(toks))
        return mat, toks, offs


class MockFaceDetector:
    """Connected components of face-marked pixels."""

    def __init__(self, seed: int = 0, min_area: int = 4):
        self.seed = seed
        self.min_area = min_area

    def detect(self, pixels):
        p = to_float_image(pixels)
        labels, n = ndimage.label(p[..., 2] >= FACE_MARK)
        boxes = []
        for i, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == i
            if comp.sum() < self.min_area:
                continue
            ys, xs = sl
            boxes.append(FaceBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start, float(comp.mean())))
        boxes.sort(key=lambda b: (b.y, b.x))
        return boxes


class MockFaceEmbedder:
    """ArcFace/FaceNet stand-in: the red/green face pattern at FACE_GRID resolution, lifted isometrically.

    Cosine between two embeddings equals cosine between the (pattern - 0.5) vectors.
    """

    def __init__(self, seed: int = 0, dim: int = 512):
        if dim < 2 * FACE_GRID * FACE_GRID:
            raise AdapterError(f"face embedding dim must be >= {2 * FACE_GRID * FACE_GRID}")
        self.seed = seed
        self.dim = dim

    def pattern(self, face_pixels):
        p = to_float_image(face_pixels)
        return area_resize(p[..., :2], FACE_GRID, FACE_GRID).ravel() - 0.5

    def embed(self, face_pixels):
        v = self.pattern(face_pixels)
        lift = _isometry(stable_seed("face-lift", self.seed), self.dim, v.size)
        n = np.linalg.norm(v)
        if n < 1e-12:
            # featureless face; any fixed unit direction keeps the contract
            return FaceEmbedding(lift[:, 0].copy())
        u = lift @ (v / n)
        return FaceEmbedding(u / np.linalg.norm(u))

    def embed_tag(self, image_tag, seed):
        return mock_face_embedder(image_tag, seed, self.dim)


class MockSegmenter:
    """Panoptic 'person' masks as connected components of person-marked pixels."""

    def __init__(self, seed: int = 0, min_area: int = 4):
        self.seed = seed
        self.min_area = min_area

    def segment(self, pixels):
        p = to_float_image(pixels)
        labels, n = ndimage.label(p[..., 2] >= PERSON_MARK)
        out = []
        for i in range(1, n + 1):
            m = labels == i
            if m.sum() >= self.min_area:
                out.append(SegmentMask(m, "person"))
        return out


_CAPTION_SCENES = (
    "riding a horse",
    "holding a cup",
    "standing on a beach",
    "in front of a building",
    "smiling at the camera",
    "wearing a red sweater",
    "sitting at a table",
    "playing the guitar",
)


class MockCaptioner:
    """BLIP2 stand-in driven by the ``identity:variant`` tag.

    ``class_of`` maps identities to their class word (otherwise man/woman by hash).
    Greedy captions omit the class word for a ``greedy_omit_fraction`` of tags,
    use a plural for ``plural_fraction`` and mention a second person for
    ``multi_fraction``.  Random mode drops the class word with ``random_omit_prob``.
    """

    def __init__(
        self,
        seed: int = 0,
        class_of: Mapping[str, str] | None = None,
        greedy_omit_fraction: float = 0.0,
        plural_fraction: float = 0.0,
        multi_fraction: float = 0.0,
        random_omit_prob: float = 0.5,
    ):
        self.seed = seed
        self.class_of = dict(class_of or {})
        self.greedy_omit_fraction = greedy_omit_fraction
        self.plural_fraction = plural_fraction
        self.multi_fraction = multi_fraction
        self.random_omit_prob = random_omit_prob

    def _class_word(self, ident):
        if ident in self.class_of:
            return self.class_of[ident]
        return ("man", "woman")[stable_seed("class", self.seed, ident) % 2]

    def _u(self, *parts):
        return stable_seed(*parts) / 2.0**63

    def caption(self, image_tag, mode="greedy", seed=0):
        ident, _ = parse_tag(image_tag)
        cw = self._class_word(ident)
        if mode == "greedy":
            scene = _CAPTION_SCENES[stable_seed("scene", self.seed, image_tag) % len(_CAPTION_SCENES)]
            if self._u("omit", self.seed, image_tag) < self.greedy_omit_fraction:
                return f"a blurry photo {scene}"
            if self._u("plural", self.seed, image_tag) < self.plural_fraction:
                plural = {v: k for k, v in PLURALS.items() if k != "persons"}[cw]
                return f"two {plural} {scene}"
            if self._u("multi", self.seed, image_tag) < self.multi_fraction:
                other = ("woman", "man", "boy", "girl")[stable_seed("other", self.seed, image_tag) % 4]
                return f"a {cw} and a {other} {scene}"
            return f"a {cw} {scene}"
        if mode == "random":
            rng = rng_for("caption-random", self.seed, image_tag, seed)
            scene = _CAPTION_SCENES[rng.integers(len(_CAPTION_SCENES))]
            adj = ("young", "happy", "tall", "serious")[rng.integers(4)]
            if rng.random() < self.random_omit_prob:
                return f"a {adj} figure {scene}"
            return f"a {adj} {cw} {scene}"
        raise AdapterError(f"unknown caption mode {mode!r}")


class MockDependencyParser:
    """Splits a caption into one sub-caption per class-word occurrence.

    A boundary between consecutive class words is placed at the last conjunction
    or punctuation token between them, else halfway.
    """

    boundary_words = ("and", "with", "next", "beside", "while", ",", ";")

    def __init__(self, seed: int = 0):
        self.seed = seed

    def segment_by_class_words(self, caption, vocabulary):
        words = list(re.finditer(r"\w+|[^\w\s]", caption))
        vocab = set(vocabulary)
        hits = [i for i, m in enumerate(words) if m.group().lower() in vocab]
        if not hits:
            return []
        cuts = [0]
        for a, b in zip(hits, hits[1:]):
            between = [k for k in range(a + 1, b) if words[k].group().lower() in self.boundary_words]
            k = between[-1] if between else (a + b + 1) // 2
            cuts.append(words[k].start())
        cuts.append(len(caption))
        out = []
        for j, i in enumerate(hits):
            seg = caption[cuts[j] : cuts[j + 1]].strip()
            out.append((seg, words[i].group().lower(), words[i].span()))
        return out


class MockLabelSimilarity:
    """SentenceFormer stand-in: hashed word vectors, similarity mapped to [0, 1]."""

    def __init__(self, seed: int = 0, dim: int = 16):
        self.seed = seed
        self.dim = dim

    def similarity(self, a, b):
        if a == b:
            return 1.0
        va = rng_for("label", self.seed, a).standard_normal(self.dim)
        vb = rng_for("label", self.seed, b).standard_normal(self.dim)
        return float((1.0 + va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))) / 2.0)


class MockPerceptualDistance:
    """LPIPS stand-in: mean squared difference of area-pooled images at three scales."""

    scales = (32, 16, 8)

    def __init__(self, seed: int = 0):
        self.seed = seed

    def distance(self, a, b):
        a, b = to_float_image(a), to_float_image(b)
        if a.shape != b.shape:
            raise AdapterError(f"perceptual distance needs equal shapes, got {a.shape} vs {b.shape}")
        total = 0.0
        for s in self.scales:
            total += float(np.mean((area_resize(a, s, s) - area_resize(b, s, s)) ** 2))
        return total / len(self.scales)


class MockFeatures:
    """Fixed random features of an 8x8 pooled image; ``nonlinear`` adds a tanh (DINO flavour)."""

    def __init__(self, seed: int = 0, dim: int = 16, name: str = "fid", nonlinear: bool = False):
        self.seed = seed
        self.dim = dim
        self.name = name
        self.nonlinear = nonlinear

    def features(self, pixels):
        v = area_resize(to_float_image(pixels), 8, 8).ravel() - 0.5
        f = _projection(stable_seed(self.name, self.seed), self.dim, v.size) @ v
        return np.tanh(2.0 * f) if self.nonlinear else f


# ---------------------------------------------------------------------------
# Registry and adapter set

ROLES = (
    "image_encoder",
    "text_encoder",
    "face_detector",
    "face_embedder",
    "segmenter",
    "captioner",
    "parser",
    "label_similarity",
    "perceptual",
    "fid_features",
    "dino",
)

_REGISTRY: dict[str, dict[str, Callable[..., object]]] = {role: {} for role in ROLES}


def register_adapter(role: str, name: str):
    """Decorator registering a factory ``f(seed=..., **options)`` for ``role`` under ``name``."""
    if role not in _REGISTRY:
        raise AdapterError(f"unknown adapter role {role!r}")

    def deco(factory):
        _REGISTRY[role][name] = factory
        return factory

    return deco


register_adapter("image_encoder", "mock")(MockImageEncoder)
register_adapter("text_encoder", "mock")(MockTextEncoder)
register_adapter("face_detector", "mock")(MockFaceDetector)
register_adapter("face_embedder", "mock")(MockFaceEmbedder)
register_adapter("segmenter", "mock")(MockSegmenter)
register_adapter("captioner", "mock")(MockCaptioner)
register_adapter("parser", "mock")(MockDependencyParser)
register_adapter("label_similarity", "mock")(MockLabelSimilarity)
register_adapter("perceptual", "mock")(MockPerceptualDistance)
register_adapter("fid_features", "mock")(lambda seed=0, **kw: MockFeatures(seed, name="fid", **kw))
register_adapter("dino", "mock")(lambda seed=0, **kw: MockFeatures(seed, dim=kw.pop("dim", 32), name="dino", nonlinear=True, **kw))


def _resolve(role, name):
    if name in _REGISTRY[role]:
        return _REGISTRY[role][name]
    if ":" in name:
        # plugin given as "package.module:factory"; importing may register more names
        mod, _, attr = name.partition(":")
        return getattr(importlib.import_module(mod), attr)
    raise AdapterError(f"no adapter named {name!r} registered for role {role!r}")


@dataclass
class AdapterSet:
    image_encoder: ImageEncoder | None = None
    text_encoder: TextEncoder | None = None
    face_detector: FaceDetector | None = None
    face_embedder: FaceEmbedder | None = None
    segmenter: Segmenter | None = None
    captioner: Captioner | None = None
    parser: DependencyParser | None = None
    label_similarity: LabelSimilarity | None = None
    perceptual: PerceptualDistance | None = None
    fid_features: FeatureExtractor | None = None
    dino: FeatureExtractor | None = None
    names: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "AdapterSet":
        missing = [f.name for f in fields(self) if f.name != "names" and getattr(self, f.name) is None]
        if missing:
            raise AdapterError(f"adapter slots not populated: {', '.join(missing)}")
        return self


def build_adapters(
    selection: Mapping[str, str] | None = None,
    seed: int = 0,
    options: Mapping[str, Mapping] | None = None,
) -> AdapterSet:
    """Construct every adapter role; roles absent from ``selection`` default to ``"mock"``."""
    selection = dict(selection or {})
    options = dict(options or {})
    unknown = (set(selection) | set(options)) - set(ROLES)
    if unknown:
        raise AdapterError(f"unknown adapter roles: {sorted(unknown)}")
    kwargs, names = {}, {}
    for role in ROLES:
        name = selection.get(role, "mock")
        kwargs[role] = _resolve(role, name)(seed=seed, **dict(options.get(role, {})))
        names[role] = name
    return AdapterSet(**kwargs, names=names).validate()


def mock_adapters(seed: int = 0, embed_dim: int = 32, **options) -> AdapterSet:
    """All-mock adapter set with the text encoder sized to ``embed_dim``."""
    opts = {"text_encoder": {"dim": embed_dim}}
    for role, opt in options.items():
        opts.setdefault(role, {}).update(opt)
    return build_adapters(seed=seed, options=opts)
