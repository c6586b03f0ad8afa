"""
Masked image modeling on vertical patches
=========================================

Hide 45% of the patches, let the encoder see the rest, regress the hidden
representations and decode their normalized pixels.  A short run on the
toy images, then a triptych: input / masked / reconstruction.
"""

import numpy as np

from maskocr.ablation import ToySetup
from maskocr.ablation import build_toy_data
from maskocr.pretrain_visual import MIMConfig, MIMPretrainer, batch_mask, pretrain_encoder, reconstruct, save_triptych
from maskocr.training import StageConfig

setup = ToySetup(n_visual=2000, n_language=1, n_finetune=1, n_val=1, n_test=8)
data = build_toy_data(setup)
cfg = setup.model_config()

stage = StageConfig(epochs=30, batch_size=64, lr=1.5e-3, warmup_epochs=1.0)
ckpt, pre, log = pretrain_encoder(cfg, data.visual, stage, MIMConfig.from_dict(setup.mim), seed=0)

for r in log.records:
    if r.get("summary") and r["epoch"] % 5 == 4:
        print(f"epoch {r['epoch']:>2}  total {r['loss_total']:.3f}  pixel {r['loss_pixel']:.3f}  "
              f"align {r['loss_align']:.4f}")

model = MIMPretrainer.from_checkpoint(ckpt)
mask = batch_mask(8, cfg.num_patches, 0.45, np.random.default_rng(0))
inp, masked, recon = reconstruct(model, data.test.images[:8], mask)
print("wrote", save_triptych(inp, masked, recon, "triptych.png"))
