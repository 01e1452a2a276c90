"""Identity and prompt fidelity metrics, face diversity, FID and the benchmark driver."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .adapters import AdapterSet, FaceBox
from .data_pipeline import load_id_image
from .diffusion import IdentityDiffusion, SamplerConfig, checkpoint_digest, config_hash, generate, load_checkpoint
from .encoders import ConfigurationError, IDImage
from .imaging import area_resize, cosine, stable_seed, to_float_image

log = logging.getLogger(__name__)

PLACEHOLDER = "<class word>"
FACE_CROP = 160
FID_EPS = 1e-6
METRICS = ("clip_t", "clip_i", "dino", "face_sim", "face_div", "fid")
# Summary columns in the order of the usual comparison table
SUMMARY_COLUMNS = ("CLIP-T", "CLIP-I", "DINO", "Face Sim.", "Face Div.", "FID")

DEFAULT_PROMPTS = (
    "a photo of a <class word>",
    "a <class word> wearing a Superman outfit",
    "a <class word> wearing a spacesuit",
    "a <class word> wearing a red sweater",
    "a <class word> wearing a purple wizard outfit",
    "a <class word> wearing a blue hoodie",
    "a <class word> wearing headphones",
    "a <class word> with red hair",
    "a <class word> wearing headphones with red hair",
    "a <class word> wearing a Christmas hat",
    "a <class word> wearing sunglasses",
    "a <class word> wearing sunglasses and necklace",
    "a <class word> wearing a blue cap",
    "a <class word> wearing a doctoral cap",
    "a <class word> with white hair, wearing glasses",
    "a <class word> in a helmet and vest riding a motorcycle",
    "a <class word> holding a bottle of red wine",
    "a <class word> driving a bus in the desert",
    "a <class word> playing basketball",
    "a <class word> playing the violin",
    "a <class word> piloting a spaceship",
    "a <class word> riding a horse",
    "a <class word> coding in front of a computer",
    "a <class word> playing the guitar",
    "a <class word> laughing on the lawn",
    "a <class word> frowning at the camera",
    "a <class word> happily smiling, looking at the camera",
    "a <class word> crying disappointedly, with tears flowing",
    "a <class word> playing the guitar in the view of left side",
    "a <class word> holding a bottle of red wine, upper body",
    "a <class word> wearing sunglasses and necklace, close-up, in the view of right side",
    "a <class word> riding a horse, in the view of the top",
    "a <class word> wearing a doctoral cap, upper body, with the left side of the face facing the camera",
    "a <class word> crying disappointedly, with tears flowing, with left side of the face facing the camera",
    "a <class word> sitting in front of the camera, with a beautiful purple sunset at the beach in the background",
    "a <class word> swimming in the pool",
    "a <class word> climbing a mountain",
    "a <class word> skiing on the snowy mountain",
    "a <class word> in the snow",
    "a <class word> in space wearing a spacesuit",
)


# ---------------------------------------------------------------------------
# Face helpers


def largest_face(pixels: np.ndarray, adapters: AdapterSet) -> FaceBox | None:
    boxes = adapters.face_detector.detect(pixels)
    if not boxes:
        return None
    # first of the largest keeps the choice deterministic
    return max(boxes, key=lambda b: b.area)


def face_crop(pixels: np.ndarray, adapters: AdapterSet) -> np.ndarray | None:
    box = largest_face(pixels, adapters)
    if box is None:
        return None
    px = to_float_image(pixels)
    box = box.clip(*px.shape[:2])
    return px[box.y : box.y + box.h, box.x : box.x + box.w]


@dataclass
class FaceScore:
    value: float
    face_found: bool


def face_similarity(generated: np.ndarray, references: Sequence[np.ndarray], adapters: AdapterSet) -> FaceScore:
    """Mean cosine between the generated face embedding and each reference face embedding."""
    if not references:
        raise ConfigurationError("face similarity needs at least one reference")
    ref_crops = [c for c in (face_crop(r, adapters) for r in references) if c is not None]
    if not ref_crops:
        raise ConfigurationError("no face detected in any reference image")
    crop = face_crop(generated, adapters)
    if crop is None:
        return FaceScore(0.0, False)
    g = adapters.face_embedder.embed(crop).vector
    sims = [float(np.dot(g, adapters.face_embedder.embed(c).vector)) for c in ref_crops]
    return FaceScore(float(np.clip(np.mean(sims), -1.0, 1.0)), True)


def face_diversity(generated: Sequence[np.ndarray], adapters: AdapterSet, crop_size: int = FACE_CROP) -> float | None:
    """Mean perceptual distance over all unordered pairs of face crops; None below two faces."""
    crops = [c for c in (face_crop(g, adapters) for g in generated) if c is not None]
    if len(crops) < 2:
        return None
    crops = [area_resize(c, crop_size, crop_size) for c in crops]
    dists = [adapters.perceptual.distance(a, b) for a, b in itertools.combinations(crops, 2)]
    return float(np.mean(dists))


def clip_t(generated: np.ndarray, prompt: str, adapters: AdapterSet) -> float:
    return cosine(adapters.image_encoder.encode_text(prompt), adapters.image_encoder.encode_image(generated))


def _mean_feature_cosine(generated, references, extract) -> float:
    if not references:
        raise ConfigurationError("need at least one reference image")
    g = extract(generated)
    return float(np.mean([cosine(g, extract(r)) for r in references]))


def clip_i(generated: np.ndarray, references: Sequence[np.ndarray], adapters: AdapterSet) -> float:
    return _mean_feature_cosine(generated, references, adapters.image_encoder.encode_image)


def dino_sim(generated: np.ndarray, references: Sequence[np.ndarray], adapters: AdapterSet) -> float:
    return _mean_feature_cosine(generated, references, adapters.dino.features)


# ---------------------------------------------------------------------------
# FID


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(cov)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = FID_EPS) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of (S1 S2)^(1/2) is taken from the eigenvalues of the symmetric matrix
    S1^(1/2) S2 S1^(1/2).  If either covariance has clearly negative eigenvalues, eps*I
    is added to both; a covariance that stays indefinite is an error.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValueError("feature dimensions differ")
    tol = 1e-10 * max(1.0, float(np.abs(cov1).max()), float(np.abs(cov2).max()))
    for attempt in range(2):
        lows = [linalg.eigvalsh(c).min() for c in (cov1, cov2)]
        if min(lows) >= -tol:
            break
        if attempt:
            raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {min(lows):.3g})")
        cov1 = cov1 + eps * np.eye(len(cov1))
        cov2 = cov2 + eps * np.eye(len(cov2))
    s1 = _psd_sqrt(cov1)
    m = s1 @ cov2 @ s1
    tr_sqrt = float(np.sqrt(np.clip(linalg.eigvalsh((m + m.T) / 2), 0.0, None)).sum())
    diff = mu1 - mu2
    return max(float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt), 0.0)


def fid_from_features(a: np.ndarray, b: np.ndarray, eps: float = FID_EPS) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least two samples per set")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)


def fid_score(
    generated: Sequence[np.ndarray], references: Sequence[np.ndarray], adapters: AdapterSet, min_samples: int = 50
) -> float:
    if min(len(generated), len(references)) < min_samples:
        log.info("FID over %d/%d images is statistically weak", len(generated), len(references))
    fa = np.stack([adapters.fid_features.features(g) for g in generated])
    fb = np.stack([adapters.fid_features.features(r) for r in references])
    return fid_from_features(fa, fb)


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class IDGroup:
    class_word: str
    images: list[IDImage]


@dataclass
class EvalConfig:
    id_groups: dict[str, IDGroup]
    prompts: list[str] = field(default_factory=lambda: list(DEFAULT_PROMPTS))
    images_per_prompt: int = 4
    references_per_id: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.id_groups:
            raise ConfigurationError("evaluation needs at least one ID group")
        for ident, g in self.id_groups.items():
            if len(g.images) != self.references_per_id:
                raise ConfigurationError(f"ID {ident!r} has {len(g.images)} references, expected {self.references_per_id}")
        for p in self.prompts:
            if PLACEHOLDER not in p:
                raise ConfigurationError(f"prompt {p!r} lacks the {PLACEHOLDER} placeholder")
        if self.images_per_prompt < 1:
            raise ConfigurationError("images_per_prompt must be >= 1")

    def describe(self) -> dict:
        return {
            "ids": {k: {"class_word": g.class_word, "references": [im.source_id for im in g.images]} for k, g in sorted(self.id_groups.items())},
            "prompts": list(self.prompts),
            "images_per_prompt": self.images_per_prompt,
            "seed": self.seed,
        }


@dataclass
class MetricReport:
    cells: list[dict]
    means: dict[str, float | None]
    metadata: dict
    timing: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metadata": self.metadata, "means": self.means, "cells": self.cells}

    def summary_row(self) -> dict:
        row = {col: self.means[m] for col, m in zip(SUMMARY_COLUMNS, METRICS)}
        row["Speed"] = self.timing.get("seconds_per_image")
        return row


def generation_seed(seed: int, ident: str, prompt_index: int, k: int) -> int:
    return stable_seed("bench", seed, ident, prompt_index, k) % (2**31)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_benchmark(
    checkpoint,
    eval_config: EvalConfig,
    adapters: AdapterSet,
    sampler: SamplerConfig | None = None,
    mode: str | None = None,
    model: IdentityDiffusion | None = None,
) -> MetricReport:
    """Generate ``images_per_prompt`` images per (ID, prompt) cell and score every metric.

    FID is computed once over all generations against all references.  Failed
    generations are recorded in their cell and the run continues.
    """
    sampler = sampler or SamplerConfig()
    if model is None:
        model, meta, _ = load_checkpoint(checkpoint)
    ckpt_hash = checkpoint_digest(checkpoint) if checkpoint is not None else None
    cells, all_generated, all_refs = [], [], []
    n_images, elapsed = 0, 0.0
    for ident in sorted(eval_config.id_groups):
        group = eval_config.id_groups[ident]
        refs = [im.pixels for im in group.images]
        all_refs.extend(refs)
        for pi, template in enumerate(eval_config.prompts):
            prompt = template.replace(PLACEHOLDER, group.class_word)
            images, errors = [], []
            for k in range(eval_config.images_per_prompt):
                seed = generation_seed(eval_config.seed, ident, pi, k)
                t0 = time.perf_counter()
                try:
                    img, _ = generate(prompt, group.images, sampler, adapters, model, seed=seed, mode=mode)
                except Exception as exc:  # keep benchmarking the remaining cells
                    errors.append(f"image {k}: {exc}")
                    continue
                elapsed += time.perf_counter() - t0
                n_images += 1
                images.append(img)
            all_generated.extend(images)
            face = [face_similarity(g, refs, adapters) for g in images]
            cells.append(
                {
                    "id": ident,
                    "prompt_index": pi,
                    "prompt": prompt,
                    "clip_t": _mean(clip_t(g, prompt, adapters) for g in images),
                    "clip_i": _mean(clip_i(g, refs, adapters) for g in images),
                    "dino": _mean(dino_sim(g, refs, adapters) for g in images),
                    "face_sim": _mean(f.value for f in face),
                    "faces_missing": sum(not f.face_found for f in face),
                    "face_div": face_diversity(images, adapters),
                    "errors": errors,
                }
            )
    fid = fid_score(all_generated, all_refs, adapters) if len(all_generated) >= 2 and len(all_refs) >= 2 else None
    means = {m: _mean(c[m] for c in cells) for m in METRICS if m != "fid"}
    means["fid"] = fid
    metadata = {
        "config_hash": config_hash({"eval": eval_config.describe(), "sampler": asdict(sampler), "mode": mode}),
        "checkpoint_hash": ckpt_hash,
        "compose_mode": mode or model.config.compose_mode,
        "sampler": asdict(sampler),
        "n_cells": len(cells),
        "n_images": n_images,
    }
    timing = {"seconds_per_image": elapsed / n_images if n_images else None, "images": n_images}
    return MetricReport(cells, means, metadata, timing)


def run_ablation(
    checkpoint, eval_config: EvalConfig, adapters: AdapterSet, modes=("average", "linear", "stacked"), sampler=None
) -> dict[str, MetricReport]:
    """One report per embedding-composing mode on the same checkpoint and seeds."""
    model, _, _ = load_checkpoint(checkpoint)
    return {m: run_benchmark(checkpoint, eval_config, adapters, sampler, mode=m, model=model) for m in modes}


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_report(report: MetricReport, out_dir, stem: str = "report") -> dict[str, Path]:
    """JSON (full), CSV (one summary row) and a separate timing file, which is not deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv", "timing": out_dir / f"{stem}_timing.json"}
    with open(paths["json"], "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([_fmt(report.means[m]) for m in METRICS])
    with open(paths["timing"], "w") as fh:
        json.dump(report.timing, fh, indent=2, sort_keys=True)
    return paths


def load_eval_config(path, adapters: AdapterSet, image_size: int) -> EvalConfig:
    """Read an eval config JSON: ``{"ids": {id: {"class_word", "images", "masks"?}}, "prompts"?, ...}``.

    Relative image paths resolve against the config file's directory.
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    unknown = set(raw) - {"ids", "prompts", "images_per_prompt", "references_per_id", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown eval config keys: {sorted(unknown)}")
    groups = {}
    for ident, spec in raw.get("ids", {}).items():
        masks = spec.get("masks") or [None] * len(spec["images"])
        if len(masks) != len(spec["images"]):
            raise ConfigurationError(f"ID {ident!r}: {len(spec['images'])} images but {len(masks)} masks")
        images = []
        for img, mask in zip(spec["images"], masks):
            px, m = load_id_image(
                path.parent / img, image_size, path.parent / mask if mask else None, adapters, source_id=ident
            )
            images.append(IDImage(px, m, ident))
        groups[ident] = IDGroup(spec["class_word"], images)
    kwargs = {k: raw[k] for k in ("prompts", "images_per_prompt", "references_per_id", "seed") if k in raw}
    return EvalConfig(groups, **kwargs)
