"""Tests for the deterministic synthetic corpus and the image sources.

The corpus contract: every artifact is a pure function of (seed, pair_id),
caption embeddings sit on the unit sphere clustered by class, images land
strictly inside (-1, 1), and the on-disk corpus (caches + manifest + meta)
round-trips exactly. Directory loading is checked against a PNG written with
Pillow using hand-computed pixel scalings.
"""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from capalign.cache import EmbeddingCache, validate_cache
from capalign.data import (
    DirectoryImageSource,
    SynthSpec,
    SyntheticImageSource,
    build_corpus,
    caption_embedding,
    class_of,
    load_corpus_spec,
    prototypes,
    read_manifest_entries,
    render_image,
)
from capalign.errors import ConfigError, IngestionError

SPEC = SynthSpec(n_pairs=12, n_classes=4, image_size=8, channels=3, embed_dim=16, seed=5)


# --- determinism and geometry ----------------------------------------------------


def test_caption_embeddings_are_pure_functions_of_seed_and_id():
    again = SynthSpec(n_pairs=12, n_classes=4, image_size=8, channels=3,
                      embed_dim=16, seed=5)
    for pair_id in range(SPEC.n_pairs):
        a = caption_embedding(SPEC, pair_id)
        b = caption_embedding(again, pair_id)
        assert a.tobytes() == b.tobytes()


def test_different_seeds_give_different_corpora():
    other = SynthSpec(n_pairs=12, n_classes=4, image_size=8, channels=3,
                      embed_dim=16, seed=6)
    assert caption_embedding(SPEC, 0).tobytes() != caption_embedding(other, 0).tobytes()
    assert prototypes(SPEC).tobytes() != prototypes(other).tobytes()


def test_prototypes_and_captions_are_unit_norm():
    assert np.allclose(np.linalg.norm(prototypes(SPEC), axis=1), 1.0, atol=1e-6)
    for pair_id in range(SPEC.n_pairs):
        assert np.linalg.norm(caption_embedding(SPEC, pair_id)) == pytest.approx(1.0, abs=1e-6)


def test_class_structure_groups_captions():
    # same-class pairs share a cone; cross-class cosines must sit lower on average
    embeds = np.stack([caption_embedding(SPEC, i) for i in range(SPEC.n_pairs)])
    classes = np.array([class_of(SPEC, i) for i in range(SPEC.n_pairs)])
    assert np.array_equal(classes, np.arange(SPEC.n_pairs) % SPEC.n_classes)
    sims = embeds @ embeds.T
    same, cross = [], []
    for i in range(SPEC.n_pairs):
        for j in range(i + 1, SPEC.n_pairs):
            (same if classes[i] == classes[j] else cross).append(sims[i, j])
    assert np.mean(same) > np.mean(cross) + 0.1


def test_render_image_shape_range_and_determinism():
    img = render_image(SPEC, 3)
    assert img.shape == (3, 8, 8)
    assert img.dtype == np.float32
    assert np.all(img > -1.0) and np.all(img < 1.0)
    assert img.tobytes() == render_image(SPEC, 3).tobytes()
    assert img.tobytes() != render_image(SPEC, 4).tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=0, max_value=99))
def test_caption_embedding_property(seed, pair_id):
    spec = SynthSpec(n_pairs=100, n_classes=10, image_size=4, channels=1,
                     embed_dim=8, seed=seed)
    v = caption_embedding(spec, pair_id)
    assert v.shape == (8,)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)
    assert v.tobytes() == caption_embedding(spec, pair_id).tobytes()


def test_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(n_pairs=4, n_classes=5)
    with pytest.raises(ConfigError):
        SynthSpec(class_noise=2.0)
    with pytest.raises(ConfigError):
        SynthSpec(image_size=0)
    with pytest.raises(ConfigError):
        SynthSpec(n_classes=0)


# --- image sources ---------------------------------------------------------------


def test_synthetic_source_matches_render():
    source = SyntheticImageSource(SPEC)
    for pair_id in (0, 5, 11):
        assert source.load(f"synth:{pair_id}").tobytes() == render_image(SPEC, pair_id).tobytes()


def test_synthetic_source_rejects_bad_locators():
    source = SyntheticImageSource(SPEC)
    with pytest.raises(IngestionError):
        source.load("file:0")
    with pytest.raises(IngestionError):
        source.load("synth:zero")


def test_directory_source_scales_pixels(tmp_path):
    # 2x2 RGB: pure black, pure white, mid gray, pure red
    arr = np.array([[[0, 0, 0], [255, 255, 255]],
                    [[127, 127, 127], [255, 0, 0]]], dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "probe.png")
    out = DirectoryImageSource(str(tmp_path), image_size=2).load("probe.png")
    assert out.shape == (3, 2, 2)
    assert out[0, 0, 0] == pytest.approx(-1.0, abs=1e-6)
    assert out[0, 0, 1] == pytest.approx(1.0, abs=1e-6)
    assert out[0, 1, 0] == pytest.approx(127 / 127.5 - 1.0, abs=1e-6)
    assert out[0, 1, 1] == pytest.approx(1.0, abs=1e-6)
    assert out[1, 1, 1] == pytest.approx(-1.0, abs=1e-6)


def test_directory_source_resizes(tmp_path):
    arr = np.full((8, 8, 3), 200, dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "big.png")
    out = DirectoryImageSource(str(tmp_path), image_size=4).load("big.png")
    assert out.shape == (3, 4, 4)
    assert np.allclose(out, 200 / 127.5 - 1.0, atol=1e-6)


def test_directory_source_errors(tmp_path):
    src = DirectoryImageSource(str(tmp_path), image_size=4)
    with pytest.raises(IngestionError):
        src.load("missing.png")
    (tmp_path / "fake.png").write_text("not an image")
    with pytest.raises(IngestionError):
        src.load("fake.png")


# --- corpus on disk --------------------------------------------------------------


def test_build_corpus_roundtrip(tmp_path):
    paths = build_corpus(str(tmp_path / "corpus"), SPEC)
    header = validate_cache(paths["captions"], deep=True)
    assert header.record_count == SPEC.n_pairs
    assert header.dim == SPEC.embed_dim
    assert header.normalized is True

    with EmbeddingCache.open(paths["captions"]) as cache:
        assert cache.ids().tolist() == list(range(SPEC.n_pairs))
        got = cache.lookup(7)
        assert np.allclose(got, caption_embedding(SPEC, 7), atol=1e-6)

    with EmbeddingCache.open(paths["anchors"]) as anchors:
        assert anchors.ids().tolist() == list(range(SPEC.n_classes))
        proto = prototypes(SPEC)
        for k in range(SPEC.n_classes):
            assert np.allclose(anchors.lookup(k), proto[k], atol=1e-6)

    entries = read_manifest_entries(paths["manifest"])
    assert entries == [(i, f"synth:{i}") for i in range(SPEC.n_pairs)]

    assert load_corpus_spec(str(tmp_path / "corpus")) == SPEC


def test_build_corpus_is_deterministic(tmp_path):
    a = build_corpus(str(tmp_path / "a"), SPEC)
    b = build_corpus(str(tmp_path / "b"), SPEC)
    for key in ("captions", "anchors"):
        with open(a[key], "rb") as fa, open(b[key], "rb") as fb:
            assert fa.read() == fb.read()
    with open(a["manifest"]) as fa, open(b["manifest"]) as fb:
        assert fa.read() == fb.read()


def test_load_corpus_spec_rejects_unknown_format(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    (d / "meta.json").write_text(json.dumps({"format": "other", "spec": {}}))
    with pytest.raises(IngestionError, match="format"):
        load_corpus_spec(str(d))
    with pytest.raises(IngestionError):
        load_corpus_spec(str(tmp_path / "nowhere"))


def test_read_manifest_reports_line_numbers(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"caption_id": 0, "image": "synth:0"}\nnot json\n')
    with pytest.raises(IngestionError, match=":2:"):
        read_manifest_entries(str(path))
    path.write_text('{"image": "synth:0"}\n')
    with pytest.raises(IngestionError, match=":1:"):
        read_manifest_entries(str(path))


def test_read_manifest_skips_blank_lines(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"caption_id": 0, "image": "synth:0"}\n\n{"caption_id": 1, "image": "synth:1"}\n')
    assert read_manifest_entries(str(path)) == [(0, "synth:0"), (1, "synth:1")]
