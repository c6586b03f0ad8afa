"""Deterministic text-image renderer with exact per-character boxes.

Glyphs come from procedural bitmap fonts rather than TTF files, so every
character box is known exactly and rendering is bit-reproducible from a seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ConfigurationError(ValueError):
    pass


class RenderOverflowError(ValueError):
    """Rendered text does not fit on the canvas."""


@dataclass
class GlyphFont:
    font_id: str
    glyph_bitmaps: dict[str, np.ndarray]
    baseline: int

    @property
    def height(self) -> int:
        return next(iter(self.glyph_bitmaps.values())).shape[0]

    def width(self, ch: str) -> int:
        return self.glyph_bitmaps[ch].shape[1]

    def validate(self, chars) -> None:
        heights = {b.shape[0] for b in self.glyph_bitmaps.values()}
        if len(heights) != 1:
            raise ConfigurationError(f"font {self.font_id}: glyph heights differ {sorted(heights)}")
        missing = [c for c in chars if c not in self.glyph_bitmaps]
        if missing:
            raise ConfigurationError(f"font {self.font_id}: no glyph for {missing!r}")
        if any(b.shape[1] < 1 for b in self.glyph_bitmaps.values()):
            raise ConfigurationError(f"font {self.font_id}: zero-width glyph")


def make_font(alphabet, font_id: str, seed: int, height: int = 10,
              width_range: tuple[int, int] = (3, 5), density: float = 0.5,
              baseline: int | None = None, twin_flips: int | None = None) -> GlyphFont:
    """Build a procedural bitmap font.

    Every glyph column has at least one set pixel, so the tight horizontal
    extent of a glyph is its full bitmap width.  With ``twin_flips`` set,
    glyph ``2k+1`` is a copy of glyph ``2k`` with that many pixels flipped,
    producing visually confusable pairs.
    """
    rng = np.random.default_rng(seed)
    bitmaps: dict[str, np.ndarray] = {}
    alphabet = list(alphabet)
    for i, ch in enumerate(alphabet):
        if twin_flips is not None and i % 2 == 1:
            bm = bitmaps[alphabet[i - 1]].copy()
            flat = bm.reshape(-1)
            for idx in rng.choice(flat.size, size=min(twin_flips, flat.size), replace=False):
                flat[idx] = not flat[idx]
        else:
            w = int(rng.integers(width_range[0], width_range[1] + 1))
            bm = rng.random((height, w)) < density
        for col in range(bm.shape[1]):
            if not bm[:, col].any():
                bm[int(rng.integers(height)), col] = True
        bitmaps[ch] = bm
    return GlyphFont(font_id, bitmaps, height if baseline is None else baseline)


def procedural_fonts(alphabet, n_fonts: int = 2, seed: int = 0, **kwargs) -> list[GlyphFont]:
    return [make_font(alphabet, f"proc{i}", seed * 1000 + i, **kwargs) for i in range(n_fonts)]


@dataclass
class CorpusSpec:
    alphabet: list[str]
    bigram_weights: np.ndarray
    length_range: tuple[int, int]
    size: int = 0

    def validate(self) -> None:
        if len(self.alphabet) == 0:
            raise ConfigurationError("empty alphabet")
        k = len(self.alphabet)
        w = np.asarray(self.bigram_weights, dtype=float)
        if w.shape != (k, k):
            raise ConfigurationError(f"bigram_weights shape {w.shape}, expected {(k, k)}")
        if (w < 0).any() or (w.sum(axis=1) <= 0).any():
            raise ConfigurationError("bigram rows must be nonnegative with positive sum")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad length_range {self.length_range}")


def uniform_corpus(alphabet, length_range) -> CorpusSpec:
    k = len(alphabet)
    return CorpusSpec(list(alphabet), np.ones((k, k)), tuple(length_range))


def deterministic_bigram_corpus(alphabet, length_range, seed: int = 0) -> CorpusSpec:
    """Each character fully determines its right neighbour (a random cyclic successor map)."""
    k = len(alphabet)
    perm = np.random.default_rng(seed).permutation(k)
    w = np.zeros((k, k))
    # a single k-cycle, so no character maps to itself
    for i in range(k):
        w[perm[i], perm[(i + 1) % k]] = 1.0
    return CorpusSpec(list(alphabet), w, tuple(length_range))


def twin_bigram_corpus(alphabet, length_range, fanout: int = 3) -> CorpusSpec:
    """Language over confusable glyph pairs (2k, 2k+1).

    From character ``c`` the chain moves to one of ``fanout`` pairs, and
    which member of each pair is picked is fixed by ``c``.  Context therefore
    disambiguates twins that are hard to tell apart visually.
    """
    k = len(alphabet)
    if k % 2:
        raise ConfigurationError("twin corpus needs an even alphabet")
    npairs = k // 2
    w = np.zeros((k, k))
    for c in range(k):
        for j in range(fanout):
            p = (c // 2 + 1 + 2 * j) % npairs
            member = (c + p) % 2
            w[c, 2 * p + member] = 1.0
    return CorpusSpec(list(alphabet), w, tuple(length_range))


def sample_text(spec: CorpusSpec, rng_seed: int) -> str:
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    lo, hi = spec.length_range
    length = int(rng.integers(lo, hi + 1))
    w = np.asarray(spec.bigram_weights, dtype=float)
    probs = w / w.sum(axis=1, keepdims=True)
    k = len(spec.alphabet)
    idx = [int(rng.integers(k))]
    for _ in range(length - 1):
        idx.append(int(rng.choice(k, p=probs[idx[-1]])))
    return "".join(spec.alphabet[i] for i in idx)


@dataclass
class Style:
    bg_level: float = 0.9
    fg_level: float = 0.1
    noise_sigma: float = 0.0
    spacing_px: int = 1
    margin_px: int = 0


@dataclass
class Canvas:
    C: int = 3
    H: int = 32
    W: int = 128


@dataclass
class TextSample:
    image: np.ndarray
    text: str
    char_boxes: list[tuple[float, float, float, float]]
    font_id: str = ""
    seed: int = 0
    bg_level: float | None = None

    def validate(self) -> None:
        C, H, W = self.image.shape
        assert C in (1, 3)
        assert len(self.char_boxes) == len(self.text)
        prev_x1 = -np.inf
        for x0, x1, y0, y1 in self.char_boxes:
            assert 0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H
            assert prev_x1 <= x0
            prev_x1 = x1


def text_width(text: str, font: GlyphFont, spacing_px: int) -> int:
    return sum(font.width(c) for c in text) + spacing_px * max(len(text) - 1, 0)


def render(text: str, font: GlyphFont, style: Style, canvas: Canvas, rng_seed: int) -> TextSample:
    if style.fg_level == style.bg_level:
        raise ConfigurationError("fg_level equals bg_level")
    if style.spacing_px < 0:
        raise ConfigurationError("negative spacing")
    if canvas.C not in (1, 3):
        raise ConfigurationError(f"channels must be 1 or 3, got {canvas.C}")
    font.validate(set(text))
    gh = font.height
    top = font.baseline - gh
    if top < 0 or font.baseline > canvas.H:
        raise ConfigurationError(f"glyph band [{top}, {font.baseline}) outside canvas height {canvas.H}")
    needed = style.margin_px + text_width(text, font, style.spacing_px)
    if needed > canvas.W:
        raise RenderOverflowError(f"text {text!r} needs {needed}px, canvas is {canvas.W}px")

    gray = np.full((canvas.H, canvas.W), style.bg_level, dtype=np.float64)
    boxes = []
    x = style.margin_px
    for ch in text:
        bm = font.glyph_bitmaps[ch]
        w = bm.shape[1]
        region = gray[top:font.baseline, x:x + w]
        region[bm] = style.fg_level
        boxes.append((float(x), float(x + w), float(top), float(font.baseline)))
        x += w + style.spacing_px
    if style.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        gray = gray + rng.normal(0.0, style.noise_sigma, size=gray.shape)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    image = np.repeat(gray[None], canvas.C, axis=0)
    return TextSample(image, text, boxes, font.font_id, int(rng_seed), float(style.bg_level))


@dataclass
class StyleRanges:
    bg_level: tuple[float, float] = (0.75, 0.95)
    fg_level: tuple[float, float] = (0.05, 0.3)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    spacing_px: tuple[int, int] = (0, 2)
    margin_px: tuple[int, int] = (0, 4)
    min_contrast: float = 0.2

    def sample(self, rng: np.random.Generator) -> Style:
        for _ in range(100):
            bg = float(rng.uniform(*self.bg_level))
            fg = float(rng.uniform(*self.fg_level))
            if abs(bg - fg) >= self.min_contrast:
                break
        else:
            raise ConfigurationError("style ranges cannot reach min_contrast")
        return Style(bg, fg, float(rng.uniform(*self.noise_sigma)),
                     int(rng.integers(self.spacing_px[0], self.spacing_px[1] + 1)),
                     int(rng.integers(self.margin_px[0], self.margin_px[1] + 1)))


def sample_seed(rng_seed: int, index: int, attempt: int = 0) -> int:
    """Per-sample seed; independent of worker order and distinct across base seeds."""
    ss = np.random.SeedSequence([int(rng_seed), int(index), int(attempt)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_sample(spec: CorpusSpec, fonts, style_ranges: StyleRanges, canvas: Canvas,
                    rng_seed: int, index: int, max_attempts: int = 50) -> TextSample:
    """Render sample ``index`` of a dataset, re-sampling text on overflow."""
    for attempt in range(max_attempts):
        seed = sample_seed(rng_seed, index, attempt)
        rng = np.random.default_rng(seed)
        text = sample_text(spec, seed)
        font = fonts[int(rng.integers(len(fonts)))]
        style = style_ranges.sample(rng)
        try:
            return render(text, font, style, canvas, int(rng.integers(2**63)))
        except RenderOverflowError:
            continue
    raise RenderOverflowError(f"sample {index}: no text fits after {max_attempts} attempts")


def generate_samples(spec, fonts, style_ranges, canvas, size: int, rng_seed: int) -> list[TextSample]:
    spec.validate()
    return [generate_sample(spec, fonts, style_ranges, canvas, rng_seed, i) for i in range(size)]


def _split_names(size: int, fractions: dict[str, float]) -> list[str]:
    names = []
    bounds = np.cumsum([fractions[k] for k in fractions]) * size
    keys = list(fractions)
    for i in range(size):
        j = int(np.searchsorted(bounds, i, side="right"))
        names.append(keys[min(j, len(keys) - 1)])
    return names


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def load_image(path, channels: int | None = None) -> np.ndarray:
    img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    img = img[None] if img.ndim == 2 else np.transpose(img, (2, 0, 1))
    if channels is not None and img.shape[0] != channels:
        img = np.repeat(img[:1], channels, axis=0) if channels == 3 else img[:1]
    return np.ascontiguousarray(img)


def build_dataset(spec: CorpusSpec, fonts, style_ranges: StyleRanges, canvas: Canvas, size: int,
                  out_dir, rng_seed: int,
                  splits: dict[str, float] | None = None) -> Path:
    """Render ``size`` samples as PNG files plus ``manifest.jsonl``.

    A sidecar ``manifest.meta.json`` records split fractions, seed, canvas
    and font ids.  Paths in the manifest are relative to ``out_dir``.
    """
    splits = splits or {"train": 0.8, "val": 0.1, "test": 0.1}
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {img_dir}: {e}") from e
    spec.validate()
    names = _split_names(size, splits)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(size):
            s = generate_sample(spec, fonts, style_ranges, canvas, rng_seed, i)
            rel = f"images/{i:06d}.png"
            try:
                save_image(s.image, out_dir / rel)
            except OSError as e:
                raise OSError(f"failed writing {out_dir / rel}: {e}") from e
            rec = {"path": rel, "text": s.text, "char_boxes": [list(b) for b in s.char_boxes],
                   "font_id": s.font_id, "seed": s.seed, "bg_level": s.bg_level, "split": names[i]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    meta = {"size": size, "rng_seed": rng_seed, "splits": splits, "canvas": asdict(canvas),
            "alphabet": list(spec.alphabet), "length_range": list(spec.length_range),
            "fonts": [f.font_id for f in fonts], "style_ranges": asdict(style_ranges)}
    with open(out_dir / "manifest.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, ensure_ascii=False)
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_samples(manifest, channels: int | None = None, split: str | None = None) -> list[TextSample]:
    root = Path(manifest).parent
    out = []
    for rec in read_manifest(manifest):
        if split is not None and rec.get("split") != split:
            continue
        img = load_image(root / rec["path"], channels)
        boxes = [tuple(float(v) for v in b) for b in rec["char_boxes"]]
        out.append(TextSample(img, rec["text"], boxes, rec.get("font_id", ""),
                              int(rec.get("seed", 0)), rec.get("bg_level")))
    return out
