"""Synthetic identity scenes rendered in the colour code the mock adapters read.

Each identity gets a coarse red/green face pattern on a TEMPLATE_GRID x TEMPLATE_GRID
grid.  The first PATTERN_DIM identities are columns of a fixed orthonormal matrix, so
their pattern cosines are exactly zero before per-image variation; further identities
get seeded random unit directions.  Used by the tests, the demos and the CLI fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .adapters import FaceBox
from .imaging import nearest_resize, orthonormal_columns, rng_for, stable_seed, to_uint8_image

# coarse enough for the toy denoiser to reproduce, and a divisor of the embedder grid
TEMPLATE_GRID = 2
PATTERN_DIM = 2 * TEMPLATE_GRID * TEMPLATE_GRID
FACE_BLUE = 0.95
BODY_BLUE = 0.6


def identity_templates(identities: Sequence[str], seed: int = 0) -> dict[str, np.ndarray]:
    """Unit pattern vector per identity; the first PATTERN_DIM are mutually orthogonal."""
    q = orthonormal_columns(PATTERN_DIM, PATTERN_DIM, stable_seed("templates", seed))
    out = {}
    for i, ident in enumerate(identities):
        if i < PATTERN_DIM:
            out[ident] = q[:, i].copy()
        else:
            v = rng_for("template", seed, ident).standard_normal(PATTERN_DIM)
            out[ident] = v / np.linalg.norm(v)
    return out


def face_patch(template: np.ndarray, h: int, w: int, rng: np.random.Generator, variation: float = 0.1) -> np.ndarray:
    """h x w x 3 face: red/green from the (perturbed) pattern, blue = face mark."""
    v = template + variation * rng.standard_normal(template.size) / np.sqrt(template.size)
    v = v / np.linalg.norm(v)
    rg = np.clip(0.5 + 0.8 * v.reshape(TEMPLATE_GRID, TEMPLATE_GRID, 2), 0.02, 0.98)
    patch = np.empty((h, w, 3))
    patch[..., :2] = nearest_resize(rg, h, w)
    patch[..., 2] = FACE_BLUE
    return patch


@dataclass
class Person:
    template: np.ndarray
    box: FaceBox
    tag: str


def render_scene(height: int, width: int, persons: Sequence[Person], seed: int) -> np.ndarray:
    """Smooth background, one body per person below its face, faces drawn last."""
    rng = rng_for("scene", seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((height, width, 3))
    for c, (lo, hi) in enumerate(((0.2, 0.8), (0.2, 0.8), (0.05, 0.25))):
        a, b, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(lo, hi)
        img[..., c] = np.clip(base + a * yy + b * xx, lo, hi)
    for p in persons:
        prng = rng_for("body", seed, p.tag)
        bw = int(round(p.box.w * 1.2))
        x0 = max(p.box.x + p.box.w // 2 - bw // 2, 0)
        x1 = min(x0 + bw, width)
        y0 = min(p.box.y + p.box.h - 1, height - 1)
        img[y0:, x0:x1, 0] = prng.uniform(0.2, 0.8)
        img[y0:, x0:x1, 1] = prng.uniform(0.2, 0.8)
        img[y0:, x0:x1, 2] = BODY_BLUE
    for p in persons:
        b = p.box
        img[b.y : b.y + b.h, b.x : b.x + b.w] = face_patch(p.template, b.h, b.w, rng_for("face", seed, p.tag))
    return img


def write_corpus(
    root: str | Path,
    identities: Sequence[str],
    images_per_id: int,
    seed: int = 0,
    size: tuple[int, int] = (512, 640),
    face_range: tuple[int, int] = (256, 320),
    second_face_every: int = 0,
    intruders: dict[str, Sequence[int]] | None = None,
    distractors: Sequence[str] = ("zz_distractor",),
    placement: str = "random",
) -> dict[str, np.ndarray]:
    """Write ``root/<identity>/<k>.png`` scenes; returns the identity templates.

    ``second_face_every=k`` adds a distractor person to every k-th image.
    ``intruders={ident: [k, ...]}`` swaps the main face of those images for a distractor identity.
    ``placement="portrait"`` puts the main face near the top centre with a small jitter
    instead of anywhere in the frame.
    """
    if placement not in ("random", "portrait"):
        raise ValueError(f"unknown placement {placement!r}")
    root = Path(root)
    templates = identity_templates(list(identities) + list(distractors), seed)
    intruders = {k: set(v) for k, v in (intruders or {}).items()}
    height, width = size
    for ident in identities:
        (root / ident).mkdir(parents=True, exist_ok=True)
        for k in range(images_per_id):
            rng = rng_for("corpus", seed, ident, k)
            fs = int(rng.integers(face_range[0], face_range[1] + 1))
            if placement == "portrait":
                jitter = max(fs // 16, 1)
                fx = int(np.clip((width - fs) // 2 + rng.integers(-jitter, jitter + 1), 0, width - fs))
                fy = int(np.clip((height - fs) // 4 + rng.integers(-jitter, jitter + 1), 0, max(height - fs, 0)))
            else:
                fx = int(rng.integers(0, width - fs + 1))
                fy = int(rng.integers(0, max(height - fs - 32, 0) + 1))
            owner = distractors[0] if k in intruders.get(ident, ()) else ident
            persons = [Person(templates[owner], FaceBox(fx, fy, fs, fs), f"{owner}:{ident}-{k}")]
            h, w = height, width
            if second_face_every and k % second_face_every == second_face_every - 1:
                # second person in the top-left corner, main person pushed to the bottom-right
                ds = int(rng.integers(face_range[0], face_range[1] + 1))
                w = max(width, 2 * face_range[1] + 160)
                persons[0] = Person(persons[0].template, FaceBox(w - fs, h - fs, fs, fs), persons[0].tag)
                persons.append(Person(templates[distractors[-1]], FaceBox(0, 0, ds, ds), f"{distractors[-1]}:{ident}-{k}"))
            img = render_scene(h, w, persons, stable_seed(seed, ident, k))
            Image.fromarray(to_uint8_image(img)).save(root / ident / f"{k:03d}.png")
    return templates
