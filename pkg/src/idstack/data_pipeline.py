"""ID-oriented dataset construction: size/face filtering, ID verification, cropping, masks, captions, marking.

Input is a folder tree ``<root>/<id_tag>/*.{jpg,png}``; output is ``manifest.jsonl``,
``images/<id_tag>/<name>.png`` (square crops), ``masks/<id_tag>/<name>.png`` (1-bit)
and ``attrition.json`` with per-stage survivor counts and the names dropped at each stage.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.distance import cdist

from .adapters import DEFAULT_CLASS_VOCAB, PLURALS, AdapterSet, FaceBox, SegmentMask
from .imaging import area_resize, stable_seed, to_float_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
STAGES = ("decode", "resolution", "detection", "verification", "crop", "mask", "caption", "mark")


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    min_side: int = 512
    min_face: int = 256
    sigma_threshold: float = 8.0
    min_face_ratio: float = 0.10
    retry_limit: int = 10
    class_vocabulary: tuple[str, ...] = DEFAULT_CLASS_VOCAB
    seed: int = 0

    def __post_init__(self):
        self.class_vocabulary = tuple(self.class_vocabulary)


@dataclass(eq=False)
class ImageRecord:
    id_tag: str
    path: Path
    pixels: np.ndarray  # uint8 H x W x 3

    @property
    def name(self) -> str:
        return self.path.stem

    @property
    def tag(self) -> str:
        return f"{self.id_tag}:{self.path.stem}"


@dataclass
class IdentityGroup:
    id_tag: str
    images: list[ImageRecord] = field(default_factory=list)


@dataclass(eq=False)
class DetectionRecord:
    image: ImageRecord
    boxes: list[FaceBox]
    embeddings: list[np.ndarray] = field(default_factory=list)
    sum_scores: list[float] = field(default_factory=list)
    chosen: int | None = None


@dataclass
class ManifestEntry:
    id_tag: str
    image: str
    mask: str
    face_box: list[int]
    caption: str
    class_word: str
    class_span: list[int]
    source: str = ""
    crop_box: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "ManifestEntry":
        return cls(**d)


# ---------------------------------------------------------------------------
# Stages


def filter_by_face_size(image: ImageRecord, adapters: AdapterSet, min_face: int = 256) -> DetectionRecord | None:
    """Keep boxes at least ``min_face`` on both sides; None when nothing survives."""
    h, w = image.pixels.shape[:2]
    boxes = [b.clip(h, w) for b in adapters.face_detector.detect(image.pixels)]
    keep = [b for b in boxes if b.w >= min_face and b.h >= min_face]
    if not keep:
        return None
    return DetectionRecord(image, keep)


def _crop(pixels, b: FaceBox):
    return pixels[b.y : b.y + b.h, b.x : b.x + b.w]


def select_and_reject(
    dist: np.ndarray, owners: Sequence[int], sigma_threshold: float = 8.0
) -> tuple[list[int], list[list[float]], np.ndarray, np.ndarray]:
    """Verification core on a box-by-box distance matrix.

    ``owners[k]`` is the image index of box ``k``.  Returns the chosen box per image
    (position within the image), per-image box sum scores, the final sum scores over
    chosen boxes and the boolean keep mask.
    """
    sim = -np.array(dist, dtype=np.float64)
    np.fill_diagonal(sim, 0.0)
    scores = sim.sum(axis=1)
    owners = np.asarray(owners)
    n = int(owners.max()) + 1 if owners.size else 0
    chosen, box_scores, kept_rows = [], [], []
    for r in range(n):
        rows = np.flatnonzero(owners == r)
        box_scores.append(scores[rows].tolist())
        c = int(np.argmax(scores[rows]))  # first maximum on ties
        chosen.append(c)
        kept_rows.append(rows[c])
    if n <= 1:
        return chosen, box_scores, np.zeros(n), np.ones(n, dtype=bool)
    final = sim[np.ix_(kept_rows, kept_rows)].sum(axis=1)
    cut = final.mean() - sigma_threshold * final.std()
    return chosen, box_scores, final, ~(final < cut)


def verify_identity_group(
    records: Sequence[DetectionRecord], adapters: AdapterSet, sigma_threshold: float = 8.0
) -> tuple[list[DetectionRecord], list[DetectionRecord]]:
    """Choose one box per image by summed similarity and drop images below mean - k*std.

    Similarity is the negative Euclidean distance of unit face embeddings.  Returns
    ``(kept, rejected)``; ``chosen`` and ``sum_scores`` are filled on the records.
    """
    if not records:
        return [], []
    owners, embs = [], []
    for r, rec in enumerate(records):
        rec.embeddings = [adapters.face_embedder.embed(_crop(rec.image.pixels, b)).vector for b in rec.boxes]
        owners.extend([r] * len(rec.boxes))
        embs.extend(rec.embeddings)
    embs = np.asarray(embs)
    chosen, box_scores, final, keep = select_and_reject(cdist(embs, embs), owners, sigma_threshold)
    for rec, c, bs in zip(records, chosen, box_scores):
        rec.chosen = c
        rec.sum_scores = bs
    if len(records) == 1:
        return list(records), []
    for rec, s in zip(records, final):
        rec.sum_scores = rec.sum_scores + [float(s)]
    kept = [rec for rec, k in zip(records, keep) if k]
    rejected = [rec for rec, k in zip(records, keep) if not k]
    return kept, rejected


def crop_square(
    pixels: np.ndarray, face_box: FaceBox, min_face_ratio: float = 0.10
) -> tuple[np.ndarray, FaceBox, tuple[int, int, int]]:
    """Largest square crop, centred on the face, in which the face keeps >= ``min_face_ratio`` of the area.

    Returns ``(crop, box_in_crop_frame, (x0, y0, side))``.
    """
    h, w = pixels.shape[:2]
    if max(face_box.w, face_box.h) > min(h, w):
        # no square inside the image can contain the face
        log.warning("face box %s does not fit a square crop of %dx%d; passing the image through", face_box, w, h)
        return pixels, face_box.clip(h, w), (0, 0, min(h, w))
    side = min(math.floor(math.sqrt(face_box.area / min_face_ratio)), h, w)
    # guard against float rounding pushing side^2 over the limit
    while side * side * min_face_ratio > face_box.area + 1e-9:
        side -= 1
    side = max(side, face_box.w, face_box.h)
    cx, cy = face_box.x + face_box.w / 2, face_box.y + face_box.h / 2
    x0 = int(min(max(round(cx - side / 2), 0), w - side))
    y0 = int(min(max(round(cy - side / 2), 0), h - side))
    # keep the whole face inside the (possibly shifted) crop
    x0 = min(max(x0, face_box.x + face_box.w - side), face_box.x)
    y0 = min(max(y0, face_box.y + face_box.h - side), face_box.y)
    crop = pixels[y0 : y0 + side, x0 : x0 + side]
    box = FaceBox(face_box.x - x0, face_box.y - y0, face_box.w, face_box.h, face_box.confidence)
    return crop, box, (x0, y0, side)


def mask_overlap(mask: np.ndarray, box: FaceBox) -> int:
    return int(mask[box.y : box.y + box.h, box.x : box.x + box.w].sum())


def select_person_mask(pixels: np.ndarray, face_box: FaceBox, adapters: AdapterSet) -> SegmentMask | None:
    """Person mask with the largest pixel overlap with the face box (first on ties); None if none overlap."""
    try:
        masks = [m for m in adapters.segmenter.segment(pixels) if m.class_label == "person"]
    except Exception as exc:  # segmenter backends fail in many ways; reject the image, keep the run
        log.warning("segmenter failed: %s", exc)
        return None
    if not masks:
        return None
    overlaps = [mask_overlap(m.bitmap, face_box) for m in masks]
    best = int(np.argmax(overlaps))
    if overlaps[best] == 0:
        return None
    return masks[best]


def _plural_pattern(vocabulary):
    plurals = [p for p, s in PLURALS.items() if s in vocabulary]
    return re.compile(r"\b(" + "|".join(map(re.escape, plurals)) + r")\b", re.IGNORECASE) if plurals else None


def singularize(caption: str, vocabulary: Sequence[str] = DEFAULT_CLASS_VOCAB) -> str:
    pat = _plural_pattern(set(vocabulary))
    if pat is None:
        return caption
    return pat.sub(lambda m: PLURALS[m.group(1).lower()], caption)


def class_word_occurrences(caption: str, vocabulary: Sequence[str]) -> list[tuple[str, tuple[int, int]]]:
    vocab = {v.lower() for v in vocabulary}
    return [(m.group().lower(), m.span()) for m in re.finditer(r"\w+", caption) if m.group().lower() in vocab]


def caption_with_class_word(
    image_tag: str,
    class_vocabulary: Sequence[str],
    adapters: AdapterSet,
    retry_limit: int = 10,
    seed: int = 0,
) -> str | None:
    """Greedy caption, re-sampled in random mode until a class word appears; singularized.

    Returns None after ``retry_limit`` random attempts without a class word.
    """
    caption = singularize(adapters.captioner.caption(image_tag, "greedy", seed), class_vocabulary)
    attempt = 0
    while not class_word_occurrences(caption, class_vocabulary):
        if attempt >= retry_limit:
            log.info("no class word for %s after %d retries", image_tag, retry_limit)
            return None
        caption = singularize(adapters.captioner.caption(image_tag, "random", seed + attempt + 1), class_vocabulary)
        attempt += 1
    return caption


def majority_class_word(captions: Sequence[str], vocabulary: Sequence[str]) -> str | None:
    counts = Counter(w for c in captions for w, _ in class_word_occurrences(c, vocabulary))
    if not counts:
        return None
    order = {w: i for i, w in enumerate(vocabulary)}
    return min(counts, key=lambda w: (-counts[w], order.get(w, len(order))))


def segment_scores(caption, pixels, mask, group_word, adapters, vocabulary):
    """(segment, class word, char span, clip score, label similarity, product) per parser segment."""
    out = []
    for seg, word, span in adapters.parser.segment_by_class_words(caption, vocabulary):
        clip = adapters.image_encoder.clip_score(seg, pixels, mask)
        lab = adapters.label_similarity.similarity(word, group_word)
        out.append((seg, word, span, clip, lab, clip * lab))
    return out


def mark_class_word(
    caption: str,
    pixels: np.ndarray,
    mask: np.ndarray | None,
    group_word: str | None,
    adapters: AdapterSet,
    vocabulary: Sequence[str] = DEFAULT_CLASS_VOCAB,
) -> tuple[str, tuple[int, int]] | None:
    """Pick the class-word occurrence that refers to the group identity; None if unresolvable."""
    occ = class_word_occurrences(caption, vocabulary)
    if not occ:
        return None
    if len(occ) == 1:
        return occ[0]
    if group_word is not None:
        for word, span in occ:
            if word == group_word:
                return word, span
    try:
        scored = segment_scores(caption, pixels, mask, group_word or occ[0][0], adapters, vocabulary)
    except Exception as exc:
        log.warning("dependency parsing failed for %r: %s", caption, exc)
        return None
    if not scored:
        return None
    best = max(range(len(scored)), key=lambda i: (scored[i][5], -i))
    return scored[best][1], tuple(scored[best][2])


# ---------------------------------------------------------------------------
# Driver


def _load(path: Path) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        return None


def scan_groups(input_root: Path) -> list[tuple[str, list[Path]]]:
    groups = []
    for d in sorted(p for p in Path(input_root).iterdir() if p.is_dir()):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if files:
            groups.append((d.name, files))
    return groups


class Attrition:
    def __init__(self):
        self.stages = {s: {"in": 0, "out": 0, "dropped": []} for s in STAGES}

    def record(self, stage, n_in, survivors_names, dropped_names):
        st = self.stages[stage]
        st["in"] += n_in
        st["out"] += len(survivors_names)
        st["dropped"].extend(dropped_names)

    def to_dict(self, total):
        return {"input_images": total, "stages": [{"stage": s, **self.stages[s]} for s in STAGES]}

    def stage_of(self, name):
        for s in STAGES:
            if name in self.stages[s]["dropped"]:
                return s
        return None


def build_dataset(
    input_root,
    out_dir,
    config: PipelineConfig | None = None,
    adapters: AdapterSet | None = None,
) -> tuple[list[ManifestEntry], dict]:
    """Run every stage in order and write the manifest, crops, masks and attrition report."""
    config = config or PipelineConfig()
    input_root, out_dir = Path(input_root), Path(out_dir)
    if not input_root.is_dir():
        raise PipelineError(f"input root {input_root} is not a directory")
    groups = scan_groups(input_root)
    total = sum(len(f) for _, f in groups)
    if total == 0:
        raise PipelineError(f"no images under {input_root}")
    vocab = config.class_vocabulary
    att = Attrition()
    entries: list[ManifestEntry] = []
    for id_tag, files in groups:
        rel = lambda p: p.relative_to(input_root).as_posix()  # noqa: E731

        # decode + resolution
        decoded, dropped = [], []
        for f in files:
            px = _load(f)
            (decoded if px is not None else dropped).append(f if px is None else ImageRecord(id_tag, f, px))
        att.record("decode", len(files), decoded, [rel(f) for f in dropped])
        sized = [r for r in decoded if min(r.pixels.shape[:2]) >= config.min_side]
        att.record("resolution", len(decoded), sized, [rel(r.path) for r in decoded if r not in sized])

        # face detection and size filtering
        dets = []
        for r in sized:
            d = filter_by_face_size(r, adapters, config.min_face)
            if d is not None:
                dets.append(d)
        att.record("detection", len(sized), dets, [rel(r.path) for r in sized if r not in [d.image for d in dets]])

        # ID verification
        kept, rejected = verify_identity_group(dets, adapters, config.sigma_threshold)
        att.record("verification", len(dets), kept, [rel(d.image.path) for d in rejected])

        # crop + mask
        staged, crop_drop, mask_drop = [], [], []
        for d in kept:
            box = d.boxes[d.chosen]
            crop, cbox, cframe = crop_square(d.image.pixels, box, config.min_face_ratio)
            if cbox.area / float(crop.shape[0] * crop.shape[1]) < config.min_face_ratio - 1e-9:
                crop_drop.append(rel(d.image.path))
                continue
            staged.append((d, crop, cbox, cframe))
        att.record("crop", len(kept), staged, crop_drop)
        masked = []
        for d, crop, cbox, cframe in staged:
            m = select_person_mask(crop, cbox, adapters)
            if m is None:
                mask_drop.append(rel(d.image.path))
                continue
            masked.append((d, crop, cbox, cframe, m.bitmap))
        att.record("mask", len(staged), masked, mask_drop)

        # captions, group statistics, marking
        captioned, cap_drop = [], []
        for item in masked:
            cap = caption_with_class_word(
                item[0].image.tag, vocab, adapters, config.retry_limit, stable_seed(config.seed, item[0].image.tag) % 2**31
            )
            if cap is None:
                cap_drop.append(rel(item[0].image.path))
            else:
                captioned.append((*item, cap))
        att.record("caption", len(masked), captioned, cap_drop)
        group_word = majority_class_word([c[-1] for c in captioned], vocab)
        mark_drop = []
        for d, crop, cbox, cframe, mask, cap in captioned:
            marked = mark_class_word(cap, crop, mask, group_word, adapters, vocab)
            if marked is None:
                mark_drop.append(rel(d.image.path))
                continue
            word, span = marked
            name = d.image.path.stem
            img_rel = f"images/{id_tag}/{name}.png"
            mask_rel = f"masks/{id_tag}/{name}.png"
            (out_dir / "images" / id_tag).mkdir(parents=True, exist_ok=True)
            (out_dir / "masks" / id_tag).mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(crop)).save(out_dir / img_rel)
            Image.fromarray(mask).convert("1").save(out_dir / mask_rel)
            entries.append(
                ManifestEntry(
                    id_tag=id_tag,
                    image=img_rel,
                    mask=mask_rel,
                    face_box=cbox.as_list(),
                    caption=cap,
                    class_word=word,
                    class_span=[int(span[0]), int(span[1])],
                    source=rel(d.image.path),
                    crop_box=[int(v) for v in cframe],
                )
            )
        att.record("mark", len(captioned), [e for e in entries if e.id_tag == id_tag], mark_drop)

    entries.sort(key=lambda e: (e.id_tag, e.image))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.jsonl", entries)
    report = att.to_dict(total)
    report["entries"] = len(entries)
    (out_dir / "attrition.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return entries, report


def write_manifest(path, entries: Sequence[ManifestEntry]):
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    lines = Path(path).read_text().splitlines()
    return [ManifestEntry.from_dict(json.loads(l)) for l in lines if l.strip()]


def load_id_image(
    path,
    size: int,
    mask_path=None,
    adapters: AdapterSet | None = None,
    source_id: str = "",
) -> tuple[np.ndarray, np.ndarray]:
    """Read an ID image at ``size`` x ``size`` with its body mask; returns ``(pixels, mask)``.

    Without ``mask_path`` the mask comes from the segmenter (the person overlapping the
    largest face); if nothing is found the whole frame is kept.
    """
    with Image.open(path) as im:
        full = np.asarray(im.convert("RGB"))
    pixels = area_resize(to_float_image(full), size, size)
    if mask_path is not None:
        with Image.open(mask_path) as im:
            m_full = np.asarray(im.convert("L")) > 127
    else:
        m_full = np.ones(full.shape[:2], dtype=bool)
        if adapters is not None:
            faces = adapters.face_detector.detect(full)
            if faces:
                seg = select_person_mask(full, max(faces, key=lambda b: b.area), adapters)
                if seg is not None:
                    m_full = seg.bitmap
    mask = area_resize(m_full.astype(np.float64), size, size) >= 0.5
    if not mask.any():
        log.warning("mask of %s vanishes at %dx%d; keeping the whole frame", path, size, size)
        mask = np.ones_like(mask)
    return pixels, mask
