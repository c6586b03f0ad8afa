"""
The toy text world
==================

Procedural glyph fonts, a twin-bigram corpus and two image styles:
noisy "real" images and clean "synthetic" ones.
"""

import numpy as np
from PIL import Image

from maskocr.ablation import ToySetup, toy_world
from maskocr.data import char_boxes_to_patch_indices
from maskocr.synth import generate_samples

setup = ToySetup()
corpus, fonts, real, synth, canvas = toy_world(setup)

# glyphs come in confusable pairs: (a, b), (c, d), ...
a, b = fonts[0].glyph_bitmaps["a"], fonts[0].glyph_bitmaps["b"]
print("a/b glyph pixels that differ:", int((a != b).sum()), "of", a.size)

real_samples = generate_samples(corpus, fonts, real, canvas, 6, rng_seed=0)
synth_samples = generate_samples(corpus, fonts, synth, canvas, 6, rng_seed=0)
for s in real_samples:
    print(f"{s.text:<8} font {s.font_id}  boxes {[(int(x0), int(x1)) for x0, x1, _, _ in s.char_boxes]}")

# which vertical patches does each character touch?
s = real_samples[0]
print("patches per char of", repr(s.text), char_boxes_to_patch_indices(s.char_boxes, 4, canvas.W))

rows = [np.concatenate([r.image[0], np.ones((canvas.H, 4)), y.image[0]], axis=1)
        for r, y in zip(real_samples, synth_samples)]
grid = np.concatenate([np.pad(r, ((2, 2), (0, 0)), constant_values=1.0) for r in rows])
Image.fromarray((grid * 255).astype(np.uint8)).resize((grid.shape[1] * 4, grid.shape[0] * 4),
                                                       Image.NEAREST).save("toy_world.png")
print("wrote toy_world.png (left: real style, right: synthetic style)")
