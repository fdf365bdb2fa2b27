import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrti.corpus import (DEFAULT_HELDOUT, SHAPES, TEXTURES, ConceptSet, ConceptSpec, default_grid, export_concept,
                         export_corpus, make_concept, make_corpus, render_concept)
from mrti.errors import ConfigurationError
from mrti.evaluation import ShapeClassifier, TextureClassifier, texture_features
from mrti.prompt import Pseudo, parse


@pytest.fixture(scope="module")
def corpus():
    return make_corpus()


def h_energy(img, mask):
    img = img.reshape(16, 16)
    both = mask[:, 1:] & mask[:, :-1]
    return np.abs(np.diff(img, axis=1))[both].mean()


@pytest.mark.parametrize("shape", SHAPES)
def test_flat_texture_has_two_values(shape):
    img = render_concept(ConceptSpec(shape, "flat"), 3)
    assert len(np.unique(img)) == 2
    assert img.min() == -1.0 and img.max() <= 1.0


@pytest.mark.parametrize("shape", SHAPES)
def test_stripes_have_more_high_frequency_energy(shape):
    flat = render_concept(ConceptSpec(shape, "flat"), 5)
    striped = render_concept(ConceptSpec(shape, "stripes"), 5)
    mask = (flat > -1.0).reshape(16, 16)
    assert h_energy(striped, mask) > h_energy(flat, mask)


@settings(max_examples=50, deadline=None)
@given(shape=st.sampled_from(SHAPES), texture=st.sampled_from(TEXTURES), seed=st.integers(0, 2**31),
       scale=st.floats(0.3, 1.0), contrast=st.floats(0.1, 1.0))
def test_render_is_deterministic_and_bounded(shape, texture, seed, scale, contrast):
    spec = ConceptSpec(shape, texture, scale, contrast)
    a, b = render_concept(spec, seed), render_concept(spec, seed)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (256,)
    assert np.all((a >= -1.0) & (a <= 1.0))


def test_jitter_translates_the_mask():
    spec = ConceptSpec("square", "flat")
    masks = {render_concept(spec, s).tobytes() for s in range(200)}
    assert len(masks) == 25  # every (dy, dx) in [-2, 2]^2


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ConceptSpec("hexagon", "flat")
    with pytest.raises(ConfigurationError):
        ConceptSpec("circle", "plaid")
    with pytest.raises(ConfigurationError):
        ConceptSpec("circle", "flat", scale=0.0)


def test_default_corpus_counts_and_split(corpus):
    assert len(corpus) == 4 * 4 * 32 == 512
    assert len(corpus.heldout) == round(0.1 * 512)
    ids = {(it.spec, it.seed) for it in corpus.train}
    assert not ids & {(it.spec, it.seed) for it in corpus.heldout}


def test_captions_parse_without_pseudo_words(corpus):
    for it in corpus.items:
        ast = parse(it.caption, [], T=1)
        assert not any(isinstance(n, Pseudo) for n in ast)
        assert it.caption == f"a photo of a {it.spec.texture} {it.spec.shape}"
        corpus.vocabulary.tokenize(it.caption)


def test_vocabulary_overflow():
    with pytest.raises(ConfigurationError, match="vocabulary overflow"):
        make_corpus(templates=("a drawing of a {texture} {shape}",), jitters=1)


def test_heldout_spec_is_not_in_the_grid():
    assert DEFAULT_HELDOUT not in set(default_grid())


def test_make_concept_defaults(corpus):
    concept = make_concept()
    assert len(concept.images) == 4
    clf = ShapeClassifier.from_corpus(corpus)
    assert len(set(clf.predict(concept.array))) == 1
    single = make_concept(N=1)
    assert len(single.images) == 1
    with pytest.raises(ConfigurationError):
        make_concept(N=0)


def test_concept_set_validation():
    with pytest.raises(ConfigurationError):
        ConceptSet("x", [])
    with pytest.raises(ConfigurationError):
        ConceptSet("x", [np.zeros(4), np.zeros(9)])
    with pytest.raises(ConfigurationError):
        ConceptSet("x", [np.zeros(4)], templates=("a photo",))


def test_shape_is_coarse_and_texture_is_fine(corpus):
    items = corpus.items
    X = np.stack([it.image for it in items])
    shapes = [it.spec.shape for it in items]
    textures = [it.spec.texture for it in items]
    shape_acc = np.mean(ShapeClassifier(X, shapes).predict(X, exclude_self=True) == shapes)
    tex_acc = np.mean(ShapeClassifier(X, textures).predict(X, exclude_self=True) == textures)
    assert shape_acc >= 0.95
    assert tex_acc <= 0.40


def test_high_frequency_features_separate_textures(corpus):
    clf = TextureClassifier.from_corpus(corpus)
    fresh = [(ConceptSpec(s, t), 7000 + j) for s in SHAPES for t in TEXTURES for j in range(16)]
    X = np.stack([render_concept(spec, seed) for spec, seed in fresh])
    acc = np.mean(clf.predict(X) == np.array([spec.texture for spec, _ in fresh]))
    assert acc >= 0.95
    assert texture_features(X).shape == (len(X), 2)


def test_export_layout(tmp_path, corpus):
    from PIL import Image

    out = export_corpus(make_corpus(jitters=1), tmp_path / "c")
    manifest = json.loads((out / "train" / "manifest.json").read_text())
    first = manifest[0]
    assert set(first) == {"filename", "caption", "spec", "seed", "split"}
    img = Image.open(out / "train" / first["filename"])
    assert img.size == (16, 16) and img.mode == "L"
    path = export_concept(make_concept(), tmp_path / "k")
    assert len(json.loads(path.read_text())) == 4
