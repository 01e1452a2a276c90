import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idstack.adapters import (
    FACE_MARK,
    AdapterError,
    FaceBox,
    MockCaptioner,
    build_adapters,
    mock_face_embedder,
    parse_tag,
    register_adapter,
)
from idstack.data_pipeline import caption_with_class_word
from idstack.synthetic import Person, face_patch, identity_templates, render_scene


def test_face_embedder_determinism():
    a = mock_face_embedder("a:0", 7).vector
    b = mock_face_embedder("a:0", 7).vector
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6


def test_face_embedder_margins_examples():
    same = mock_face_embedder("a:0", 7).vector @ mock_face_embedder("a:1", 7).vector
    diff = mock_face_embedder("a:0", 7).vector @ mock_face_embedder("b:0", 7).vector
    # derived from the construction: |noise| = 0.05 on a unit base gives cos >= (1 - 0.05^2) / (1 + 0.05)^2 > 0.9
    assert same > (1 - 0.05**2) / (1 + 0.05) ** 2 > 0.9
    assert diff < 0.3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text("abcdefghij", min_size=1, max_size=6), min_size=16, max_size=20, unique=True), st.integers(0, 10**6))
def test_face_embedder_separation_over_16_identities(names, seed):
    embs = {n: [mock_face_embedder(f"{n}:{v}", seed).vector for v in range(2)] for n in names}
    for i, a in enumerate(names):
        assert embs[a][0] @ embs[a][1] > 0.9
        for b in names[i + 1 :]:
            assert embs[a][0] @ embs[b][0] < 0.3


@pytest.mark.parametrize("tag", ["a", "a:b:c", ":0", "a:", 3])
def test_malformed_tags(tag):
    with pytest.raises(AdapterError):
        parse_tag(tag)


def test_image_encoder_determinism_and_mask_contract(adapters):
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    mask = np.zeros((32, 32), bool)
    mask[8:24, 8:24] = True
    enc = adapters.image_encoder
    assert np.array_equal(enc.encode_image(img), enc.encode_image(img))
    other = np.where(mask[..., None], img, rng.random(img.shape))
    assert np.array_equal(enc.encode_image(img, mask), enc.encode_image(other, mask))


def test_image_encoder_separates_identities(adapters):
    t = identity_templates(["a", "b"])
    imgs = [render_scene(64, 64, [Person(t[k], FaceBox(16, 8, 32, 32), f"{k}:0")], seed=1) for k in "ab"]
    fa, fb = (adapters.image_encoder.encode_image(i) for i in imgs)
    assert np.linalg.norm(fa - fb) > 0


def test_pixel_face_embedder_reads_templates(adapters):
    t = identity_templates([f"p{i}" for i in range(8)])
    vecs = [t[k] for k in sorted(t)]
    assert np.allclose(np.array(vecs) @ np.array(vecs).T, np.eye(8), atol=1e-12)
    rng = np.random.default_rng(0)
    e = {k: adapters.face_embedder.embed(face_patch(t[k], 64, 64, rng, variation=0.0)).vector for k in t}
    for a in e:
        for b in e:
            if a != b:
                assert e[a] @ e[b] < 0.3
    # same template, independent variations stay close
    v1 = adapters.face_embedder.embed(face_patch(t["p0"], 64, 64, rng)).vector
    v2 = adapters.face_embedder.embed(face_patch(t["p0"], 64, 64, rng)).vector
    assert v1 @ v2 > 0.9


def test_detector_and_segmenter(adapters):
    t = identity_templates(["a", "b"])
    img = render_scene(
        120, 160, [Person(t["a"], FaceBox(10, 10, 30, 30), "a:0"), Person(t["b"], FaceBox(100, 20, 40, 40), "b:0")], seed=2
    )
    boxes = adapters.face_detector.detect(img)
    assert [b.as_list() for b in boxes] == [[10, 10, 30, 30], [100, 20, 40, 40]]
    masks = adapters.segmenter.segment(img)
    assert len(masks) == 2
    assert all(m.class_label == "person" and m.bitmap.shape == img.shape[:2] for m in masks)
    assert all((img[..., 2] >= FACE_MARK)[10:40, 10:40].ravel())


def test_captioner_modes():
    cap = MockCaptioner(0)
    assert cap.caption("a:0") == cap.caption("a:0")
    texts = {cap.caption("a:0", "random", s) for s in range(1, 6)}
    assert len(texts) > 1
    with pytest.raises(AdapterError):
        cap.caption("a:0", "beam")


def test_caption_retry_loop_terminates(adapters):
    cap = MockCaptioner(0, greedy_omit_fraction=1.0)
    assert "man" not in cap.caption("a:0").split() and "woman" not in cap.caption("a:0").split()
    ad = build_adapters(options={"captioner": {"greedy_omit_fraction": 1.0}})
    out = caption_with_class_word("a:0", ("man", "woman"), ad, retry_limit=10)
    assert out is not None and ({"man", "woman"} & set(out.split()))


def test_caption_retry_exhaustion():
    ad = build_adapters(options={"captioner": {"greedy_omit_fraction": 1.0, "random_omit_prob": 1.0}})
    assert caption_with_class_word("a:0", ("man", "woman"), ad, retry_limit=3) is None


def test_label_similarity_and_perceptual(adapters):
    ls = adapters.label_similarity
    assert ls.similarity("man", "man") == 1.0
    assert 0.0 <= ls.similarity("man", "woman") <= 1.0
    img = np.random.default_rng(0).random((40, 40, 3))
    assert adapters.perceptual.distance(img, img) == 0.0
    assert adapters.perceptual.distance(img, 1 - img) > 0.0


def test_mocks_are_pure(adapters):
    img = np.random.default_rng(1).random((48, 48, 3))
    for f in (adapters.fid_features.features, adapters.dino.features, adapters.image_encoder.encode_image):
        assert f(img).tobytes() == f(img).tobytes()
    assert adapters.text_encoder.encode("a man")[0].tobytes() == adapters.text_encoder.encode("a man")[0].tobytes()


def test_registry_and_selection():
    with pytest.raises(AdapterError):
        build_adapters({"nonsense": "mock"})
    with pytest.raises(AdapterError):
        build_adapters({"captioner": "missing"})

    @register_adapter("captioner", "fixed-test")
    class Fixed:
        def __init__(self, seed=0):
            pass

        def caption(self, image_tag, mode="greedy", seed=0):
            return "a person"

    ad = build_adapters({"captioner": "fixed-test"})
    assert ad.captioner.caption("x:0") == "a person"
    assert ad.names["captioner"] == "fixed-test" and ad.names["segmenter"] == "mock"


def test_facebox_contract():
    with pytest.raises(AdapterError):
        FaceBox(0, 0, 0, 5)
    assert FaceBox(-5, -5, 20, 20).clip(10, 10).as_list() == [0, 0, 10, 10]
