import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskocr.synth import (Canvas, ConfigurationError, CorpusSpec, RenderOverflowError, Style, StyleRanges,
                           build_dataset, deterministic_bigram_corpus, make_font, procedural_fonts, read_manifest,
                           render, sample_text, twin_bigram_corpus, uniform_corpus, load_samples)

ALPHA16 = list("abcdefghijklmnop")


def test_single_symbol_alphabet():
    spec = CorpusSpec(["a"], np.ones((1, 1)), (3, 3))
    for seed in range(5):
        assert sample_text(spec, seed) == "aaa"


def test_forced_chain():
    spec = CorpusSpec(["a", "b"], np.array([[0.0, 1.0], [1.0, 0.0]]), (4, 4))
    outs = {sample_text(spec, s) for s in range(20)}
    assert outs <= {"abab", "baba"}
    assert "abab" in outs


def test_sample_text_deterministic():
    spec = uniform_corpus(ALPHA16, (3, 8))
    a, b = sample_text(spec, 7), sample_text(spec, 7)
    assert a == b and 3 <= len(a) <= 8


def test_empty_alphabet():
    with pytest.raises(ConfigurationError):
        sample_text(CorpusSpec([], np.zeros((0, 0)), (1, 2)), 0)


def test_bad_bigram_row():
    spec = CorpusSpec(["a", "b"], np.array([[0.0, 0.0], [1.0, 1.0]]), (1, 2))
    with pytest.raises(ConfigurationError):
        sample_text(spec, 0)


def test_deterministic_bigram_corpus_chain():
    spec = deterministic_bigram_corpus(ALPHA16, (5, 5), seed=3)
    succ = {}
    for s in range(50):
        t = sample_text(spec, s)
        for a, b in zip(t, t[1:]):
            assert succ.setdefault(a, b) == b


def test_twin_corpus_disambiguates_pairs():
    spec = twin_bigram_corpus(ALPHA16, (2, 2))
    w = spec.bigram_weights
    for c in range(16):
        for p in range(8):
            assert w[c, 2 * p] * w[c, 2 * p + 1] == 0


@pytest.fixture
def font():
    return make_font(ALPHA16, "f", 0, height=10, baseline=12)


def test_render_noiseless_blit(font):
    s = render("a", font, Style(0.9, 0.2, 0.0, 1), Canvas(1, 16, 32), 0)
    x0, x1, y0, y1 = map(int, s.char_boxes[0])
    bm = font.glyph_bitmaps["a"]
    region = s.image[0, y0:y1, x0:x1]
    assert np.all(region[bm] == np.float32(0.2))
    assert np.all(region[~bm] == np.float32(0.9))


def test_render_box_order(font):
    s = render("ab", font, Style(), Canvas(3, 16, 32), 0)
    assert s.char_boxes[0][1] <= s.char_boxes[1][0]
    assert s.image.shape == (3, 16, 32)
    assert np.array_equal(s.image[0], s.image[2])


def test_render_foreground_count_matches_bitmaps(font):
    text = "abc"
    s = render(text, font, Style(0.9, 0.1, 0.0, 0), Canvas(1, 16, 32), 0)
    fg = np.isclose(s.image[0], 0.1)
    inside = 0
    for x0, x1, y0, y1 in s.char_boxes:
        inside += fg[int(y0):int(y1), int(x0):int(x1)].sum()
    expected = sum(int(font.glyph_bitmaps[c].sum()) for c in text)
    assert inside == expected == fg.sum()


def test_render_overflow(font):
    with pytest.raises(RenderOverflowError):
        render("abcdefghij", font, Style(spacing_px=2), Canvas(1, 16, 16), 0)


def test_render_equal_levels(font):
    with pytest.raises(ConfigurationError):
        render("a", font, Style(0.5, 0.5), Canvas(1, 16, 16), 0)


def test_render_deterministic_with_noise(font):
    a = render("abc", font, Style(noise_sigma=0.1), Canvas(1, 16, 32), 42)
    b = render("abc", font, Style(noise_sigma=0.1), Canvas(1, 16, 32), 42)
    assert np.array_equal(a.image, b.image)
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_twin_fonts_differ_slightly():
    f = make_font(ALPHA16, "t", 1, height=10, twin_flips=3)
    a, b = f.glyph_bitmaps["a"], f.glyph_bitmaps["b"]
    assert a.shape == b.shape
    assert 1 <= (a != b).sum() <= 3 + a.shape[1]


@settings(max_examples=60, deadline=None)
@given(text=st.text(alphabet="abcdefgh", min_size=1, max_size=6), spacing=st.integers(0, 3),
       margin=st.integers(0, 5), fseed=st.integers(0, 100))
def test_box_invariants(text, spacing, margin, fseed):
    font = make_font("abcdefgh", "h", fseed, height=8, width_range=(1, 5), baseline=10)
    s = render(text, font, Style(0.8, 0.1, 0.0, spacing, margin), Canvas(1, 12, 64), 0)
    s.validate()
    assert all(b[1] - b[0] >= 1 for b in s.char_boxes)


def _spec():
    spec = uniform_corpus(ALPHA16, (3, 6))
    return spec, procedural_fonts(ALPHA16, 2, 0, height=10, baseline=13)


def test_build_dataset(tmp_path):
    spec, fonts = _spec()
    m = build_dataset(spec, fonts, StyleRanges(), Canvas(1, 16, 64), 10, tmp_path / "a", 3)
    recs = read_manifest(m)
    assert len(recs) == 10
    for r in recs:
        assert (tmp_path / "a" / r["path"]).exists()
        assert len(r["char_boxes"]) == len(r["text"])
    meta = json.loads((tmp_path / "a" / "manifest.meta.json").read_text())
    assert meta["splits"] == {"train": 0.8, "val": 0.1, "test": 0.1}
    assert [r["split"] for r in recs].count("train") == 8
    samples = load_samples(m)
    assert samples[0].image.shape == (1, 16, 64)


def test_build_dataset_deterministic(tmp_path):
    spec, fonts = _spec()
    a = build_dataset(spec, fonts, StyleRanges(), Canvas(1, 16, 64), 6, tmp_path / "a", 5)
    b = build_dataset(spec, fonts, StyleRanges(), Canvas(1, 16, 64), 6, tmp_path / "b", 5)
    assert a.read_bytes() == b.read_bytes()
    for r in read_manifest(a):
        assert (tmp_path / "a" / r["path"]).read_bytes() == (tmp_path / "b" / r["path"]).read_bytes()


def test_build_dataset_empty(tmp_path):
    spec, fonts = _spec()
    m = build_dataset(spec, fonts, StyleRanges(), Canvas(1, 16, 64), 0, tmp_path / "e", 1)
    assert read_manifest(m) == []


def test_build_dataset_unwritable(tmp_path):
    spec, fonts = _spec()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        build_dataset(spec, fonts, StyleRanges(), Canvas(1, 16, 64), 1, blocker / "sub", 1)
