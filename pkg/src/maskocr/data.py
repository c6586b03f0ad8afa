"""Vocabularies, label encoding, preprocessing and character-to-patch mapping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .synth import TextSample, load_samples

EOS_TOKEN = "<eos>"
BLANK_TOKEN = "<blank>"


class VocabError(ValueError):
    pass


class LabelLengthError(ValueError):
    pass


class PreprocessOverflowError(ValueError):
    pass


class Vocab:
    """Ordered character inventory.

    Character ids are ``0..K-1``; EOS is ``K`` and the CTC blank ``K+1``.
    ``size`` counts the classes of the query classifier (characters plus
    EOS); the CTC head has ``size + 1`` outputs.
    """

    def __init__(self, chars):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise VocabError("duplicate characters in vocab")
        if any(len(c) != 1 or c == "\n" for c in chars):
            raise VocabError("vocab entries must be single non-newline characters")
        self.chars = chars
        self.index = {c: i for i, c in enumerate(chars)}
        self.eos_id = len(chars)
        self.blank_id = len(chars) + 1

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    @property
    def ctc_size(self) -> int:
        return len(self.chars) + 2

    def __len__(self):
        return len(self.chars)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.chars == other.chars

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            if ch not in self.index:
                raise VocabError(f"character {ch!r} not in vocab")
            out.append(self.index[ch])
        return out

    def decode(self, ids) -> str:
        """Map ids to text, stopping at the first EOS; blanks are skipped."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if 0 <= i < len(self.chars):
                out.append(self.chars[i])
        return "".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#reserved eos={EOS_TOKEN} blank={BLANK_TOKEN}\n")
            for c in self.chars:
                fh.write(c + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8", newline="\n") as fh:
            lines = fh.read().split("\n")
        if not lines or not lines[0].startswith("#reserved"):
            raise VocabError(f"{path}: missing reserved-symbol header")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines[1:])


@dataclass
class LabelSeq:
    ids: np.ndarray
    true_length: int


def encode_label(text: str, vocab: Vocab, N: int) -> LabelSeq:
    if len(text) > N:
        raise LabelLengthError(f"text length {len(text)} exceeds N={N}")
    ids = np.full(N, vocab.eos_id, dtype=np.int64)
    ids[:len(text)] = vocab.encode(text)
    return LabelSeq(ids, len(text))


def _resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    if image.shape[1:] == (h, w):
        return image.copy()
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    shrink = h < image.shape[1] or w < image.shape[2]
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=shrink)
    return y[0].clamp(0, 1).numpy()


def _pad_level(sample: TextSample) -> float:
    if sample.bg_level is not None:
        return float(sample.bg_level)
    return float(np.median(sample.image))


def preprocess(sample: TextSample, mode: str, target: tuple[int, int],
               patch_width: int = 4) -> TextSample:
    """Resize to ``target=(H, W)``.

    ``line`` keeps the aspect ratio at height H and right-pads with the
    background level; ``word`` resizes anisotropically.  Boxes are rescaled
    by the same factors and kept as floats.
    """
    H, W = target
    if W % patch_width:
        raise ValueError(f"target width {W} not divisible by patch width {patch_width}")
    _, h, w = sample.image.shape
    if mode == "line":
        sx = sy = H / h
        new_w = int(round(w * sx))
        if new_w > W:
            raise PreprocessOverflowError(f"line resized to width {new_w} > {W}")
        img = _resize(sample.image, H, new_w)
        if new_w < W:
            pad = np.full((img.shape[0], H, W - new_w), _pad_level(sample), dtype=img.dtype)
            img = np.concatenate([img, pad], axis=2)
    elif mode == "word":
        sx, sy = W / w, H / h
        img = _resize(sample.image, H, W)
    else:
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    boxes = [(x0 * sx, min(x1 * sx, W), y0 * sy, min(y1 * sy, H)) for x0, x1, y0, y1 in sample.char_boxes]
    return replace(sample, image=img.astype(np.float32), char_boxes=boxes)


def char_boxes_to_patch_indices(boxes, patch_width: int, image_width: int) -> list[set[int]]:
    """Patches whose column interval has positive overlap with each box's [x0, x1)."""
    if image_width % patch_width:
        raise ValueError("patch width must divide image width")
    M = image_width // patch_width
    out = []
    for box in boxes:
        x0, x1 = box[0], box[1]
        lo = max(int(np.floor(x0 / patch_width)), 0)
        hi = min(int(np.ceil(x1 / patch_width)), M)
        out.append({p for p in range(lo, hi) if min(x1, (p + 1) * patch_width) - max(x0, p * patch_width) > 0})
    return out


def normalize_text(s: str, lowercase: bool = True, strip_spaces: bool = True,
                   subst_table: dict[str, str] | None = None) -> str:
    if subst_table:
        s = "".join(subst_table.get(c, c) for c in s)
    if lowercase:
        s = s.lower()
    if strip_spaces:
        s = "".join(s.split())
    return s


def load_subst_table(path) -> dict[str, str]:
    """Tab-separated ``source<TAB>replacement`` lines."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            src, dst = line.split("\t")
            table[src] = dst
    return table


@dataclass
class TextDataset:
    """Preprocessed samples stacked into tensors."""

    images: torch.Tensor
    labels: torch.Tensor
    lengths: torch.Tensor
    texts: list[str]
    boxes: list[list[tuple]] = field(default_factory=list)

    def __len__(self):
        return len(self.texts)

    @classmethod
    def from_samples(cls, samples, vocab: Vocab, N: int, mode: str = "word",
                     target: tuple[int, int] = (32, 128), patch_width: int = 4) -> "TextDataset":
        imgs, labels, lengths, texts, boxes = [], [], [], [], []
        for s in samples:
            p = preprocess(s, mode, target, patch_width)
            lab = encode_label(s.text, vocab, N)
            imgs.append(p.image)
            labels.append(lab.ids)
            lengths.append(lab.true_length)
            texts.append(s.text)
            boxes.append(p.char_boxes)
        if not samples:
            return cls(torch.zeros(0), torch.zeros(0, N, dtype=torch.long),
                       torch.zeros(0, dtype=torch.long), [], [])
        return cls(torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(labels)),
                   torch.tensor(lengths, dtype=torch.long), texts, boxes)

    @classmethod
    def from_manifest(cls, manifest, vocab: Vocab, N: int, mode: str = "word",
                      target: tuple[int, int] = (32, 128), patch_width: int = 4,
                      channels: int | None = None, split: str | None = None) -> "TextDataset":
        samples = load_samples(Path(manifest), channels=channels, split=split)
        return cls.from_samples(samples, vocab, N, mode, target, patch_width)

    def subset(self, idx) -> "TextDataset":
        idx = list(idx)
        t = torch.tensor(idx, dtype=torch.long)
        return TextDataset(self.images[t], self.labels[t], self.lengths[t],
                           [self.texts[i] for i in idx],
                           [self.boxes[i] for i in idx] if self.boxes else [])


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given. Keeps the ragged tail."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def augment(images: torch.Tensor, indices, seed: int, epoch: int,
            max_degrees: float = 2.0, brightness: float = 0.1) -> torch.Tensor:
    """Small-angle rotation plus brightness jitter, seeded per (seed, epoch, sample index)."""
    out = []
    for img, idx in zip(images, indices):
        rng = sample_rng(seed, epoch, int(idx))
        theta = np.deg2rad(rng.uniform(-max_degrees, max_degrees))
        shift = rng.uniform(-brightness, brightness)
        c, s = np.cos(theta), np.sin(theta)
        mat = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=img.dtype)[None]
        grid = F.affine_grid(mat, [1, *img.shape], align_corners=False)
        fill = img.median()
        rot = F.grid_sample(img[None] - fill, grid, align_corners=False, padding_mode="zeros")[0] + fill
        out.append((rot + shift).clamp(0, 1))
    return torch.stack(out)
