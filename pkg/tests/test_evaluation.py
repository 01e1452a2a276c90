import functools
import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from idstack.adapters import FaceBox
from idstack.diffusion import IdentityDiffusion, SamplerConfig, save_checkpoint
from idstack.encoders import ConfigurationError, IDImage
from idstack.evaluation import (
    DEFAULT_PROMPTS,
    FACE_CROP,
    SUMMARY_COLUMNS,
    EvalConfig,
    IDGroup,
    clip_i,
    clip_t,
    dino_sim,
    face_crop,
    face_diversity,
    face_similarity,
    fid_from_features,
    fid_score,
    frechet_distance,
    load_eval_config,
    run_ablation,
    run_benchmark,
    write_report,
)
from idstack.imaging import area_resize, to_uint8_image
from idstack.synthetic import Person, identity_templates, render_scene

TEMPLATES = identity_templates(["a", "b", "c", "d"])


@functools.lru_cache(maxsize=None)
def portrait(ident, k=0, size=64):
    box = FaceBox(size // 4, size // 8, size // 2, size // 2)
    img = render_scene(size, size, [Person(TEMPLATES[ident], box, f"{ident}:{k}")], seed=k)
    img.setflags(write=False)
    return img


def faceless(size=64):
    img = np.full((size, size, 3), 0.4)
    img[..., 2] = 0.1
    return img


# ---------------------------------------------------------------------------
# Face similarity


def test_face_similarity(adapters):
    a = portrait("a")
    s = face_similarity(a, [a], adapters)
    assert s.face_found and abs(s.value - 1.0) <= 1e-6
    cross = [face_similarity(portrait(x, 1), [portrait(y, k) for k in range(3)], adapters).value for x, y in itertools.permutations("abcd", 2)]
    assert np.mean(cross) < 0.3 and max(cross) < 0.3
    same = face_similarity(portrait("a", 5), [portrait("a", k) for k in range(3)], adapters).value
    assert same > 0.9
    miss = face_similarity(faceless(), [a], adapters)
    assert miss.value == 0.0 and not miss.face_found
    with pytest.raises(ConfigurationError):
        face_similarity(a, [faceless()], adapters)
    with pytest.raises(ConfigurationError):
        face_similarity(a, [], adapters)


def test_largest_face_used(adapters):
    img = render_scene(
        64, 96,
        [Person(TEMPLATES["a"], FaceBox(2, 2, 12, 12), "a:0"), Person(TEMPLATES["b"], FaceBox(40, 10, 40, 40), "b:0")],
        seed=0,
    )
    assert face_crop(img, adapters).shape[:2] == (40, 40)
    assert face_similarity(img, [portrait("b")], adapters).value > 0.9


# ---------------------------------------------------------------------------
# Face diversity


def _crop_distance(x, y, adapters):
    cx, cy = (area_resize(face_crop(i, adapters), FACE_CROP, FACE_CROP) for i in (x, y))
    return adapters.perceptual.distance(cx, cy)


def test_face_diversity_examples(adapters):
    a, b = portrait("a"), portrait("b")
    assert face_diversity([a, a, a, a], adapters) == 0.0
    x = _crop_distance(a, b, adapters)
    assert x > 0
    assert face_diversity([a, b], adapters) == pytest.approx(x, rel=1e-12)
    assert face_diversity([a, a, b], adapters) == pytest.approx((0 + x + x) / 3, rel=1e-12)
    assert face_diversity([a], adapters) is None
    assert face_diversity([a, faceless(), faceless()], adapters) is None


@settings(max_examples=25, deadline=None)
@given(items=st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 3)), min_size=2, max_size=5), rnd=st.randoms())
def test_face_diversity_permutation_invariant(adapters, items, rnd):
    imgs = [portrait(i, k) for i, k in items]
    shuffled = list(imgs)
    rnd.shuffle(shuffled)
    assert face_diversity(imgs, adapters) == pytest.approx(face_diversity(shuffled, adapters), rel=1e-12)


_DISTANCES: dict = {}


def _portrait_distance(p, q, adapters):
    if (p, q) not in _DISTANCES:
        _DISTANCES[p, q] = _crop_distance(portrait(*p), portrait(*q), adapters)
    return _DISTANCES[p, q]


@settings(max_examples=25, deadline=None)
@given(items=st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 3)), min_size=2, max_size=5))
def test_duplicating_most_typical_image_never_increases_diversity(adapters, items):
    imgs = [portrait(i, k) for i, k in items]
    totals = [sum(_portrait_distance(p, q, adapters) for q in items) for p in items]
    dup = imgs + [imgs[int(np.argmin(totals))]]
    assert face_diversity(dup, adapters) <= face_diversity(imgs, adapters) + 1e-12


def test_duplicating_an_outlier_can_increase_diversity(adapters):
    # a mean over pairs rises when the duplicated face is far from all the others
    group = [portrait("a", k) for k in range(3)] + [portrait("b")]
    assert face_diversity(group + [portrait("b")], adapters) > face_diversity(group, adapters)
    # two-image sets always shrink to 2/3
    pair = [portrait("a"), portrait("b")]
    assert face_diversity(pair + [pair[1]], adapters) == pytest.approx(2 / 3 * face_diversity(pair, adapters), rel=1e-12)


# ---------------------------------------------------------------------------
# CLIP / DINO


class FixedEncoder:
    def __init__(self, table):
        self.table = table

    def encode_image(self, pixels, mask=None):
        return self.table[int(round(float(np.asarray(pixels).flat[0]) * 100))]

    def encode_text(self, text):
        return self.table[0]


def test_feature_cosines(adapters):
    a = portrait("a")
    assert clip_i(a, [a], adapters) == pytest.approx(1.0, abs=1e-12)
    assert dino_sim(a, [a, a], adapters) == pytest.approx(1.0, abs=1e-12)
    g = np.array([1.0, 0.0])
    table = {0: g, 1: np.array([0.0, 1.0])}
    for k, c in ((2, 0.2), (4, 0.4), (6, 0.6)):
        table[k] = np.array([c, np.sqrt(1 - c * c)])
    ad = replace(adapters, image_encoder=FixedEncoder(table))
    img = lambda k: np.full((4, 4, 3), k / 100)  # noqa: E731
    assert clip_i(img(0), [img(2), img(4), img(6)], ad) == pytest.approx(0.4, abs=1e-12)
    assert clip_i(img(0), [img(1)], ad) == 0.0
    assert clip_t(img(1), "anything", ad) == 0.0
    with pytest.raises(ConfigurationError):
        clip_i(img(0), [], ad)


@settings(max_examples=30, deadline=None)
@given(ident=st.sampled_from("abcd"), k=st.integers(0, 5), prompt=st.text(max_size=30))
def test_cosines_bounded(adapters, ident, k, prompt):
    img, ref = portrait(ident, k), portrait("a", 9)
    for v in (clip_i(img, [ref], adapters), dino_sim(img, [ref], adapters), clip_t(img, prompt, adapters)):
        assert -1 - 1e-12 <= v <= 1 + 1e-12


# ---------------------------------------------------------------------------
# FID


def test_fid_identical_and_gaussian_toys(adapters):
    imgs = [portrait(i, k) for i in "abcd" for k in range(3)]
    assert fid_score(imgs, imgs, adapters) <= 1e-5
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(200_000), rng.standard_normal(200_000) + 1.0
    assert fid_from_features(a, b) == pytest.approx(1.0, abs=0.02)
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    mu1, mu2 = np.array([0.0, 1.0]), np.array([3.0, -1.0])
    assert frechet_distance(mu1, cov, mu2, cov) == pytest.approx(13.0, abs=1e-8)


def test_fid_closed_form_diagonal():
    # commuting covariances: tr term is sum (sqrt(a) - sqrt(b))^2
    c1, c2 = np.diag([1.0, 4.0, 9.0]), np.diag([4.0, 1.0, 0.0])
    expected = (1 - 2) ** 2 + (2 - 1) ** 2 + (3 - 0) ** 2
    assert frechet_distance(np.zeros(3), c1, np.zeros(3), c2) == pytest.approx(expected, abs=1e-4)


def test_fid_errors():
    with pytest.raises(ValueError, match="positive semidefinite"):
        frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        fid_from_features(np.zeros((1, 2)), np.zeros((5, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 6))
def test_fid_self_distance_zero(seed, n, d):
    x = np.random.default_rng(seed).standard_normal((n, d))
    assert 0.0 <= fid_from_features(x, x) <= 1e-5


# ---------------------------------------------------------------------------
# Benchmark driver


@pytest.fixture(scope="module")
def bench(tmp_path_factory, tiny_model_config):
    ckpt = tmp_path_factory.mktemp("bench") / "model.npz"
    model = IdentityDiffusion(tiny_model_config, seed=0)
    save_checkpoint(ckpt, model)
    size = model.codec.image_size
    groups = {}
    for ident, word in (("a", "man"), ("b", "woman")):
        imgs = [portrait(ident, k, size=size) for k in range(4)]
        groups[ident] = IDGroup(word, [IDImage(p, p[..., 2] >= 0.45, ident) for p in imgs])
    cfg = EvalConfig(groups, prompts=["a photo of a <class word>", "a <class word> wearing a red sweater"], images_per_prompt=2)
    return ckpt, cfg, SamplerConfig(steps=3)


def test_benchmark_bookkeeping_and_determinism(bench, adapters, tmp_path):
    ckpt, cfg, sampler = bench
    r1 = run_benchmark(ckpt, cfg, adapters, sampler)
    assert len(r1.cells) == 4 and r1.timing["images"] == 8 and r1.metadata["n_images"] == 8
    assert {c["prompt"] for c in r1.cells} >= {"a photo of a man", "a woman wearing a red sweater"}
    assert all(not c["errors"] for c in r1.cells)
    r2 = run_benchmark(ckpt, cfg, adapters, sampler)
    assert r1.to_json() == r2.to_json()
    p1 = write_report(r1, tmp_path / "one")
    p2 = write_report(r2, tmp_path / "two")
    for k in ("json", "csv"):
        assert p1[k].read_bytes() == p2[k].read_bytes()
    assert p1["csv"].read_text().splitlines()[0] == ",".join(SUMMARY_COLUMNS)
    assert list(r1.summary_row()) == [*SUMMARY_COLUMNS, "Speed"]


def test_benchmark_records_failures(bench, adapters):
    ckpt, cfg, sampler = bench
    bad = EvalConfig(cfg.id_groups, prompts=["a <class word> and a <class word>"], images_per_prompt=2)
    report = run_benchmark(ckpt, bad, adapters, sampler)
    assert len(report.cells) == 2 and all(len(c["errors"]) == 2 for c in report.cells)
    assert report.means["fid"] is None


def test_ablation_one_report_per_mode(bench, adapters):
    ckpt, cfg, sampler = bench
    small = EvalConfig(cfg.id_groups, prompts=cfg.prompts[:1], images_per_prompt=1)
    reports = run_ablation(ckpt, small, adapters, sampler=sampler)
    assert list(reports) == ["average", "linear", "stacked"]
    assert [r.metadata["compose_mode"] for r in reports.values()] == ["average", "linear", "stacked"]
    assert len({r.metadata["config_hash"] for r in reports.values()}) == 3


def test_eval_config_validation_and_loading(adapters, tmp_path):
    assert len(DEFAULT_PROMPTS) == 40 and len(set(DEFAULT_PROMPTS)) == 40
    img = IDImage(portrait("a", size=16), np.ones((16, 16), bool), "a")
    with pytest.raises(ConfigurationError):
        EvalConfig({})
    with pytest.raises(ConfigurationError):
        EvalConfig({"a": IDGroup("man", [img] * 3)})
    with pytest.raises(ConfigurationError):
        EvalConfig({"a": IDGroup("man", [img] * 4)}, prompts=["no placeholder"])
    for k in range(2):
        Image.fromarray(to_uint8_image(portrait("a", k))).save(tmp_path / f"a{k}.png")
    spec = {"ids": {"a": {"class_word": "man", "images": ["a0.png", "a1.png"]}}, "references_per_id": 2, "images_per_prompt": 1}
    (tmp_path / "eval.json").write_text(json.dumps(spec))
    cfg = load_eval_config(tmp_path / "eval.json", adapters, 16)
    assert cfg.id_groups["a"].images[0].pixels.shape == (16, 16, 3) and cfg.prompts == list(DEFAULT_PROMPTS)
    (tmp_path / "bad.json").write_text(json.dumps({**spec, "extra": 1}))
    with pytest.raises(ConfigurationError, match="extra"):
        load_eval_config(tmp_path / "bad.json", adapters, 16)
