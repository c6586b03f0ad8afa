"""Small deterministic datasets shared by the training tests."""

from maskocr.data import TextDataset, Vocab
from maskocr.model import ModelConfig
from maskocr.synth import Canvas, StyleRanges, deterministic_bigram_corpus, generate_samples, procedural_fonts

CLEAN = StyleRanges(bg_level=(0.9, 0.9), fg_level=(0.1, 0.1), noise_sigma=(0.0, 0.0), spacing_px=(1, 1),
                    margin_px=(0, 0))


def toy_dataset(n, seed, alphabet="abcdefgh", lengths=(3, 5)):
    fonts = procedural_fonts(alphabet, 1, 3, height=6, width_range=(3, 4), baseline=7)
    corpus = deterministic_bigram_corpus(alphabet, lengths, seed=5)
    samples = generate_samples(corpus, fonts, CLEAN, Canvas(1, 8, 32), n, seed)
    v = Vocab(alphabet)
    return TextDataset.from_samples(samples, v, 6, "word", (8, 32), 4), v


def toy_cfg(v, **over):
    d = dict(channels=1, img_h=8, img_w=32, patch_width=4, enc_dim=32, enc_heads=2, enc_layers=1, dec_dim=32,
             dec_heads=2, dec_layers=2, num_queries=6, vocab_size=v.size, mlp_ratio=2.0, drop_path_rate=0.0)
    d.update(over)
    return ModelConfig(**d)
