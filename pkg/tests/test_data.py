import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from maskocr.data import (LabelLengthError, PreprocessOverflowError, TextDataset, Vocab, VocabError, augment,
                          char_boxes_to_patch_indices, encode_label, load_subst_table, normalize_text, preprocess)
from maskocr.synth import TextSample

from oracles import patch_overlaps


def test_encode_label_basic():
    v = Vocab("ab")
    lab = encode_label("ab", v, 4)
    assert lab.ids.tolist() == [0, 1, 2, 2] and lab.true_length == 2


def test_encode_label_empty_and_full():
    v = Vocab("ab")
    assert encode_label("", v, 3).ids.tolist() == [2, 2, 2]
    full = encode_label("abab", v, 4)
    assert v.eos_id not in full.ids and full.true_length == 4


def test_encode_label_errors():
    v = Vocab("ab")
    with pytest.raises(VocabError, match="'z'"):
        encode_label("az", v, 4)
    with pytest.raises(LabelLengthError):
        encode_label("ababa", v, 4)


def test_vocab_reserved_ids_distinct():
    v = Vocab("xyz")
    assert v.eos_id == 3 and v.blank_id == 4
    assert len({v.eos_id, v.blank_id, *range(3)}) == 5
    assert v.size == 4 and v.ctc_size == 5


@given(st.text(alphabet="abc d", max_size=10))
def test_label_round_trip(text):
    v = Vocab("abc d")
    assert v.decode(encode_label(text, v, 12).ids) == text


def test_vocab_file_round_trip(tmp_path):
    v = Vocab(list("ab c"))
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text().startswith("#reserved")
    assert Vocab.load(tmp_path / "v.txt") == v


def _sample(h, w, boxes, bg=0.8):
    img = np.full((1, h, w), bg, dtype=np.float32)
    img[:, :, : w // 2] = 0.2
    return TextSample(img, "x" * len(boxes), boxes, bg_level=bg)


def test_line_mode_identity_scale():
    s = _sample(32, 64, [(0.0, 10.0, 0.0, 32.0)])
    p = preprocess(s, "line", (32, 128))
    assert np.array_equal(p.image[:, :, :64], s.image)
    assert np.all(p.image[:, :, 64:] == np.float32(0.8))
    assert p.char_boxes == s.char_boxes


def test_line_mode_half_scale():
    s = _sample(64, 256, [(10.0, 20.0, 0.0, 64.0)])
    p = preprocess(s, "line", (32, 128))
    assert p.image.shape == (1, 32, 128)
    assert p.char_boxes[0][:2] == (5.0, 10.0)


def test_word_mode_anisotropic():
    s = _sample(32, 100, [(0.0, 40.0, 0.0, 32.0), (60.0, 100.0, 0.0, 32.0)])
    p = preprocess(s, "word", (32, 128))
    sx = 128 / 100
    assert p.char_boxes[0][1] == pytest.approx(40 * sx)
    assert p.char_boxes[1][0] == pytest.approx(60 * sx)
    assert p.char_boxes[-1][1] <= 128


def test_line_mode_overflow():
    with pytest.raises(PreprocessOverflowError):
        preprocess(_sample(32, 200, [(0.0, 1.0, 0.0, 1.0)]), "line", (32, 128))


def test_preprocess_width_divisibility():
    with pytest.raises(ValueError):
        preprocess(_sample(32, 64, [(0.0, 1.0, 0.0, 1.0)]), "word", (32, 126), patch_width=4)


@given(st.lists(st.integers(1, 9), min_size=1, max_size=6), st.integers(20, 120))
def test_preprocess_keeps_order(widths, W):
    x, boxes = 0, []
    for w in widths:
        boxes.append((float(x), float(x + w), 0.0, 16.0))
        x += w
    s = TextSample(np.zeros((1, 16, x), np.float32), "a" * len(widths), boxes, bg_level=0.5)
    p = preprocess(s, "word", (16, 4 * (W // 4 + 1)))
    for a, b in zip(p.char_boxes, p.char_boxes[1:]):
        assert a[1] <= b[0] + 1e-9


@pytest.mark.parametrize("box,expected", [((8, 16), {2, 3}), ((0, 4), {0}), ((3, 5), {0, 1})])
def test_char_boxes_to_patches(box, expected):
    got = char_boxes_to_patch_indices([(box[0], box[1], 0, 1)], 4, 32)[0]
    assert got == expected == patch_overlaps(box[0], box[1], 4, 32)


@given(st.integers(0, 60), st.integers(1, 20), st.sampled_from([2, 4, 8]))
def test_char_boxes_to_patches_oracle(x0, w, pw):
    W = 64
    x1 = min(x0 + w, W)
    if x1 <= x0:
        return
    got = char_boxes_to_patch_indices([(x0, x1, 0, 1)], pw, W)[0]
    assert got == patch_overlaps(x0, x1, pw, W)
    assert got <= set(range(W // pw))


def test_normalization_rules(tmp_path):
    assert normalize_text("AbC ") == normalize_text("abc")
    (tmp_path / "t.tsv").write_text("Ａ\tA\n")
    table = load_subst_table(tmp_path / "t.tsv")
    assert normalize_text("Ａb", subst_table=table) == "ab"


def test_dataset_from_samples_and_subset():
    v = Vocab("x")
    samples = [_sample(16, 32, [(0.0, 4.0, 0.0, 16.0)]) for _ in range(3)]
    ds = TextDataset.from_samples(samples, v, 4, "word", (16, 32))
    assert ds.images.shape == (3, 1, 16, 32)
    assert ds.labels.tolist()[0] == [0, 1, 1, 1]
    assert len(ds.subset([0, 2])) == 2


def test_augment_is_reproducible():
    imgs = torch.rand(4, 1, 16, 32)
    a = augment(imgs, [0, 1, 2, 3], seed=1, epoch=0)
    b = augment(imgs[[2, 3]], [2, 3], seed=1, epoch=0)
    assert torch.equal(a[2:], b)
    assert not torch.equal(a, augment(imgs, [0, 1, 2, 3], seed=1, epoch=1))
