import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.spatial.distance import cdist

from idstack.adapters import DEFAULT_CLASS_VOCAB, FaceBox, FaceEmbedding, SegmentMask, mock_face_embedder
from idstack.data_pipeline import (
    STAGES,
    DetectionRecord,
    ImageRecord,
    PipelineConfig,
    PipelineError,
    build_dataset,
    caption_with_class_word,
    crop_square,
    filter_by_face_size,
    load_id_image,
    mark_class_word,
    read_manifest,
    segment_scores,
    select_and_reject,
    select_person_mask,
    singularize,
    verify_identity_group,
)
from idstack.synthetic import write_corpus
from tests.oracles import brute_force_mark, brute_force_verify


class StubDetector:
    def __init__(self, boxes):
        self.boxes = boxes

    def detect(self, pixels):
        return list(self.boxes)


class StubSegmenter:
    def __init__(self, masks):
        self.masks = masks

    def segment(self, pixels):
        return list(self.masks)


class LookupEmbedder:
    """Face embedder reading a box index painted into the red channel of each face."""

    def __init__(self, table):
        self.table = table

    def embed(self, face_pixels):
        return FaceEmbedding(self.table[int(face_pixels[0, 0, 0])])


def _record(boxes, shape=(600, 600)):
    return ImageRecord("x", Path("x/0.png"), np.zeros((*shape, 3), np.uint8)), boxes


# ---------------------------------------------------------------------------
# Face-size filter


@pytest.mark.parametrize(
    "sizes, kept",
    [([(300, 300)], 1), ([(255, 260)], 0), ([(200, 200), (256, 256), (400, 400)], 2)],
)
def test_filter_by_face_size(adapters, sizes, kept):
    boxes = [FaceBox(10 * i, 10 * i, w, h) for i, (w, h) in enumerate(sizes)]
    ad = replace(adapters, face_detector=StubDetector(boxes))
    rec = ImageRecord("x", Path("x/0.png"), np.zeros((1000, 1000, 3), np.uint8))
    out = filter_by_face_size(rec, ad)
    if kept == 0:
        assert out is None
    else:
        assert len(out.boxes) == kept and all(b.w >= 256 and b.h >= 256 for b in out.boxes)


# ---------------------------------------------------------------------------
# ID verification


def random_verification_instance(seed: int):
    """<= 10 images with <= 4 faces each; mostly the group identity plus stray identities."""
    rng = np.random.default_rng(seed)
    n_img = int(rng.integers(1, 11))
    embs = []
    for i in range(n_img):
        faces = []
        for j in range(int(rng.integers(1, 5))):
            ident = "group" if rng.random() < 0.6 else f"other{int(rng.integers(3))}"
            faces.append(mock_face_embedder(f"{ident}:{i}-{j}", seed).vector)
        embs.append(faces)
    return embs


def package_verify(embs, adapters, sigma=8.0):
    """Run verify_identity_group on painted images whose faces carry those embeddings."""
    table, records = [], []
    for i, faces in enumerate(embs):
        px = np.zeros((40, 40 * len(faces), 3), np.uint8)
        boxes = []
        for j, e in enumerate(faces):
            px[:, 40 * j : 40 * j + 40, 0] = len(table)
            table.append(e)
            boxes.append(FaceBox(40 * j, 0, 40, 40))
        records.append(DetectionRecord(ImageRecord("g", Path(f"g/{i}.png"), px), boxes))
    ad = replace(adapters, face_embedder=LookupEmbedder(table))
    kept, _ = verify_identity_group(records, ad, sigma)
    kept_ids = {id(r) for r in kept}
    return [r.chosen for r in records], [id(r) in kept_ids for r in records]


def test_verification_examples(adapters):
    e = mock_face_embedder("a:0", 0).vector
    chosen, keep = package_verify([[e], [e], [e]], adapters)
    assert keep == [True, True, True]
    chosen, keep = package_verify([[e, mock_face_embedder("b:0", 0).vector]], adapters)
    assert keep == [True] and chosen == [0]


def test_verification_matches_brute_force(adapters):
    for seed in range(20):
        embs = random_verification_instance(seed)
        assert package_verify(embs, adapters) == brute_force_verify([[list(v) for v in f] for f in embs])


def test_verification_rejects_with_tight_sigma(adapters):
    # a lower threshold exercises the rejection branch on small groups
    embs = [[mock_face_embedder(f"a:{i}", 1).vector] for i in range(6)] + [[mock_face_embedder("b:0", 1).vector]]
    chosen, keep = package_verify(embs, adapters, sigma=1.0)
    assert keep == [True] * 6 + [False]
    assert (chosen, keep) == brute_force_verify([[list(v) for v in f] for f in embs], sigma=1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0), st.floats(0.5, 8.0))
def test_verification_scale_invariance(seed, scale, sigma):
    rng = np.random.default_rng(seed)
    owners = sorted(rng.integers(0, 12, size=int(rng.integers(2, 40))).tolist())
    owners = np.unique(owners, return_inverse=True)[1]
    pts = rng.standard_normal((len(owners), 3))
    pts[rng.random(len(owners)) < 0.2] += 4.0
    dist = cdist(pts, pts)
    a = select_and_reject(dist, owners, sigma)
    b = select_and_reject(dist * scale, owners, sigma)
    assert a[0] == b[0] and np.array_equal(a[3], b[3])


def test_eight_sigma_needs_large_groups():
    # one outlier among n equal scores sits exactly sqrt(n - 1) population deviations below the mean
    for n in (10, 65, 66, 100):
        final = np.zeros(n)
        final[0] = -1.0
        z = (final.mean() - final[0]) / final.std()
        assert z == pytest.approx(math.sqrt(n - 1))
        assert (z > 8) == (n >= 66)


# ---------------------------------------------------------------------------
# Crop rule


def test_crop_examples():
    img = np.zeros((1000, 1000, 3), np.uint8)
    crop, box, (x0, y0, side) = crop_square(img, FaceBox(400, 400, 200, 200))
    assert side == 632 == math.floor(200 / math.sqrt(0.10))
    assert crop.shape[:2] == (632, 632) and box.area / side**2 >= 0.10
    full, fbox, frame = crop_square(img, FaceBox(0, 0, 1000, 1000))
    assert full.shape == img.shape and fbox.area / 1000**2 == 1.0
    corner, cbox, (cx, cy, cs) = crop_square(img, FaceBox(0, 0, 150, 150))
    assert corner.shape[0] == corner.shape[1] == cs and (cx, cy) == (0, 0)
    assert cbox.area / cs**2 >= 0.10
    far, _, (fx, fy, fs) = crop_square(img, FaceBox(880, 900, 120, 100))
    assert fx + fs == 1000 and fy + fs == 1000


def test_crop_oversized_face_passes_through():
    img = np.zeros((100, 100, 3), np.uint8)
    crop, box, _ = crop_square(img, FaceBox(0, 0, 150, 80))
    assert crop is img and box.w == 100
    wide = np.zeros((20, 21, 1), np.uint8)
    crop, box, _ = crop_square(wide, FaceBox(0, 0, 21, 3))
    assert crop is wide


@settings(max_examples=150, deadline=None)
@given(st.integers(20, 600), st.integers(20, 600), st.data())
def test_crop_rule_property(H, W, data):
    w = data.draw(st.integers(1, min(H, W)))
    h = data.draw(st.integers(max(1, math.ceil(w / 10)), min(H, W, 10 * w)))
    x = data.draw(st.integers(0, W - w))
    y = data.draw(st.integers(0, H - h))
    crop, box, (x0, y0, side) = crop_square(np.zeros((H, W, 1), np.uint8), FaceBox(x, y, w, h))
    assert crop.shape[0] == crop.shape[1] == side
    assert box.area / side**2 >= 0.10 - 1e-9
    assert 0 <= box.x and box.x + box.w <= side and 0 <= box.y and box.y + box.h <= side
    assert side <= max(math.floor(math.sqrt(w * h / 0.10)), w, h)


def test_crop_rule_needs_bounded_aspect():
    # a sliver wider than 10:1 cannot cover 10% of any square that contains it
    crop, box, (_, _, side) = crop_square(np.zeros((20, 20, 1), np.uint8), FaceBox(0, 0, 1, 11))
    assert side == 11 and box.area / side**2 < 0.10


# ---------------------------------------------------------------------------
# Person masks, captions, marking


def _mask(region):
    m = np.zeros((50, 50), bool)
    m[region] = True
    return SegmentMask(m)


def test_select_person_mask(adapters):
    box = FaceBox(10, 10, 20, 20)
    full = _mask(np.s_[:, :])
    assert select_person_mask(None, box, replace(adapters, segmenter=StubSegmenter([full]))) is full
    far = _mask(np.s_[40:, 40:])
    near = _mask(np.s_[10:16, 10:30])  # 6 x 20 = 120 px inside the box
    out = select_person_mask(None, box, replace(adapters, segmenter=StubSegmenter([far, near])))
    assert out is near and int(near.bitmap[10:30, 10:30].sum()) == 120
    assert select_person_mask(None, box, replace(adapters, segmenter=StubSegmenter([far]))) is None
    assert select_person_mask(None, box, replace(adapters, segmenter=StubSegmenter([]))) is None

    class Broken:
        def segment(self, pixels):
            raise RuntimeError("backend down")

    assert select_person_mask(None, box, replace(adapters, segmenter=Broken())) is None


def test_singularize_and_captions(adapters):
    assert singularize("a man riding a horse") == "a man riding a horse"
    assert singularize("two men at a table") == "two man at a table"
    assert singularize("Two Women and three children") == "Two woman and three child"

    class Fixed:
        def __init__(self, text):
            self.text = text

        def caption(self, tag, mode="greedy", seed=0):
            return self.text

    ad = replace(adapters, captioner=Fixed("two men at a table"))
    assert caption_with_class_word("p:0", ("man",), ad) == "two man at a table"
    assert caption_with_class_word("p:0", ("man",), replace(adapters, captioner=Fixed("a horse"))) is None


def test_mark_examples(adapters):
    img = np.full((32, 32, 3), 0.5)
    assert mark_class_word("a man holding a cup", img, None, "man", adapters) == ("man", (2, 5))
    assert mark_class_word("a man and a woman", img, None, "man", adapters) == ("man", (2, 5))
    assert mark_class_word("a dog", img, None, "man", adapters) is None


def random_marking_instance(seed: int):
    """Captions with 2-4 class words, none of which is the group word."""
    rng = np.random.default_rng(seed)
    words = ["boy", "girl", "child", "lady", "guy", "kid", "person"]
    k = int(rng.integers(2, 5))
    picked = [str(w) for w in rng.choice(words, size=k, replace=False)]
    scenes = ["holding a cup", "near a car", "with a hat", "on a bench"]
    caption = " and ".join(f"a {w} {scenes[int(rng.integers(4))]}" for w in picked)
    img = rng.random((32, 32, 3))
    return caption, img, "man" if rng.random() < 0.5 else "woman"


def test_marking_matches_brute_force(adapters):
    for seed in range(20):
        caption, img, group = random_marking_instance(seed)
        assert group not in caption.split()
        scored = segment_scores(caption, img, None, group, adapters, DEFAULT_CLASS_VOCAB)
        best = brute_force_mark([s[0] for s in scored], [s[3] for s in scored], [s[4] for s in scored])
        assert mark_class_word(caption, img, None, group, adapters) == (scored[best][1], tuple(scored[best][2]))


# ---------------------------------------------------------------------------
# Whole pipeline


def test_clean_corpus_zero_attrition(small_dataset):
    out, entries, report = small_dataset
    assert len(entries) == 10 and report["entries"] == 10
    assert all(not st_["dropped"] for st_ in report["stages"])
    assert [s["stage"] for s in report["stages"]] == list(STAGES)


def test_manifest_invariants(small_dataset):
    out, entries, _ = small_dataset
    assert read_manifest(out / "manifest.jsonl") == entries
    assert entries == sorted(entries, key=lambda e: (e.id_tag, e.image))
    for e in entries:
        a, b = e.class_span
        assert e.caption[a:b] == e.class_word and singularize(e.caption) == e.caption
        with Image.open(out / e.image) as im:
            side = im.size[0]
            assert im.size[0] == im.size[1]
        x, y, w, h = e.face_box
        assert w * h / side**2 >= 0.10 - 1e-9
        with Image.open(out / e.mask) as im:
            m = np.asarray(im.convert("L")) > 127
        assert m[y : y + h, x : x + w].any()


def test_build_dataset_deterministic(small_dataset, adapters, tmp_path):
    out, _, _ = small_dataset
    root = tmp_path / "corpus"
    write_corpus(root, ["alice", "bob"], 5, seed=3, placement="portrait")
    build_dataset(root, tmp_path / "again", PipelineConfig(seed=0), adapters)
    for name in ("manifest.jsonl", "attrition.json"):
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_build_dataset_errors(adapters, tmp_path):
    with pytest.raises(PipelineError):
        build_dataset(tmp_path / "missing", tmp_path / "o", None, adapters)
    (tmp_path / "empty" / "a").mkdir(parents=True)
    with pytest.raises(PipelineError):
        build_dataset(tmp_path / "empty", tmp_path / "o", None, adapters)


@pytest.fixture(scope="session")
def noisy_dataset(tmp_path_factory, adapters):
    """A large group with one wrong-ID image, small and low-resolution images, and a broken file."""
    root = tmp_path_factory.mktemp("noisy")
    write_corpus(root, ["big"], 100, seed=5, intruders={"big": [7]})
    write_corpus(root, ["small"], 3, seed=6, face_range=(180, 200))
    write_corpus(root, ["lowres"], 2, seed=7, size=(400, 640), face_range=(256, 260))
    write_corpus(root, ["pairs"], 4, seed=8, second_face_every=2)
    (root / "big" / "broken.png").write_bytes(b"not an image")
    out = tmp_path_factory.mktemp("noisy_out")
    entries, report = build_dataset(root, out, PipelineConfig(seed=0), adapters)
    return entries, report


def _dropped(report, stage):
    return next(s for s in report["stages"] if s["stage"] == stage)["dropped"]


def test_wrong_id_rejected_at_verification(noisy_dataset):
    entries, report = noisy_dataset
    assert "big/007.png" in _dropped(report, "verification")
    assert "big/007.png" not in {e.source for e in entries}
    assert sum(e.id_tag == "big" for e in entries) == 99  # image 7 is replaced by the intruder
    assert _dropped(report, "decode") == ["big/broken.png"]
    assert sorted(_dropped(report, "detection")) == ["small/000.png", "small/001.png", "small/002.png"]
    assert sorted(_dropped(report, "resolution")) == ["lowres/000.png", "lowres/001.png"]
    assert sum(e.id_tag == "pairs" for e in entries) == 4


def test_stage_monotonicity(noisy_dataset):
    _, report = noisy_dataset
    stages = report["stages"]
    assert stages[0]["in"] == report["input_images"]
    for a, b in zip(stages, stages[1:]):
        assert b["in"] == a["out"] and b["out"] <= b["in"]
        assert a["in"] - a["out"] == len(a["dropped"])
    assert stages[-1]["out"] == report["entries"]


def test_two_face_images_keep_the_group_face(noisy_dataset):
    entries, _ = noisy_dataset
    pairs = [e for e in entries if e.id_tag == "pairs"]
    # the group face sits bottom-right in the two-person scenes; the crop follows it
    two = [e for e in pairs if e.source in ("pairs/001.png", "pairs/003.png")]
    assert len(two) == 2 and all(e.crop_box[0] > 0 for e in two)


def test_load_id_image(small_dataset, adapters):
    out, entries, _ = small_dataset
    e = entries[0]
    px, m = load_id_image(out / e.image, 32, out / e.mask)
    assert px.shape == (32, 32, 3) and m.shape == (32, 32) and m.any()
    px2, m2 = load_id_image(out / e.image, 32, None, adapters)
    assert np.array_equal(px, px2) and m2.any() and not m2.all()
    _, m3 = load_id_image(out / e.image, 32)
    assert m3.all()
    json.dumps(e.__dict__)
