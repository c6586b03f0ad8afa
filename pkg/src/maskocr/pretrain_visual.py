"""Masked image modeling for the encoder, context-autoencoder style.

Visible patches go through the encoder under masked attention; a latent
regressor with mask queries predicts the representations of the hidden
patches, which are aligned to the encoder's own (gradient-blocked)
representations of those patches and decoded to normalized pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .losses import LossReport, mim_loss, patch_pixel_target
from .model import Block, CrossBlock, Encoder, ModelConfig, _init_weights, lr_scaled, patchify, unpatchify
from .training import JsonlLog, Schedule, StageConfig, check_finite, make_optimizer, seed_everything
from .data import iterate_batches


@dataclass
class MaskPlan:
    M: int
    masked: np.ndarray
    visible: np.ndarray

    def as_mask(self) -> np.ndarray:
        m = np.zeros(self.M, dtype=bool)
        m[self.masked] = True
        return m


def num_masked(M: int, ratio: float) -> int:
    return max(1, int(np.floor(ratio * M)))


def sample_patch_mask(M: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    if M < 2:
        raise ValueError("need at least two patches")
    k = num_masked(M, ratio)
    masked = np.sort(rng.choice(M, size=k, replace=False))
    visible = np.setdiff1d(np.arange(M), masked)
    return MaskPlan(M, masked, visible)


def batch_mask(B: int, M: int, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(np.stack([sample_patch_mask(M, ratio, rng).as_mask() for _ in range(B)]))


def _rows(mask: torch.Tensor) -> torch.Tensor:
    """(B, M) bool with a constant count K per row -> (B, K) sorted indices of True entries."""
    B = mask.shape[0]
    counts = mask.sum(dim=1)
    if (counts != counts[0]).any():
        raise ValueError("every sample in a batch must mask the same number of patches")
    return mask.nonzero()[:, 1].view(B, int(counts[0]))


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


@dataclass
class MIMConfig:
    mask_ratio: float = 0.45
    lam: float = 0.05
    regressor_layers: int = 4
    decoder_layers: int = 4
    target_mode: str = "masked_set"  # or "full_image"

    @classmethod
    def from_dict(cls, d: dict | None) -> "MIMConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (d or {}).items() if k in names})


class LatentRegressor(nn.Module):
    """Cross-attention stack: mask queries (+ their positions) read the visible representations."""

    def __init__(self, dim: int, heads: int, layers: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.blocks = nn.ModuleList(CrossBlock(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, visible_feats, visible_pos, masked_pos):
        if masked_pos.shape[1] == 0:
            raise ValueError("no masked patches to regress")
        x = self.mask_token + masked_pos
        ctx = visible_feats + visible_pos
        for blk in self.blocks:
            x = blk(x, ctx)
        return self.norm(x)


class PixelDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, patch_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_dim)

    def forward(self, z, masked_pos):
        x = z + masked_pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


class MIMPretrainer(nn.Module):
    def __init__(self, cfg: ModelConfig, mim: MIMConfig | None = None, encoder: Encoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.mim = mim or MIMConfig()
        if self.mim.target_mode not in ("masked_set", "full_image"):
            raise ValueError(f"unknown target_mode {self.mim.target_mode!r}")
        self.encoder = encoder if encoder is not None else Encoder(cfg)
        self.regressor = LatentRegressor(cfg.enc_dim, cfg.enc_heads, self.mim.regressor_layers, cfg.mlp_ratio)
        self.pixel_decoder = PixelDecoder(cfg.enc_dim, cfg.enc_heads, self.mim.decoder_layers,
                                          cfg.patch_dim, cfg.mlp_ratio)
        if encoder is None:
            self.encoder.apply(_init_weights)
        self.regressor.apply(_init_weights)
        self.pixel_decoder.apply(_init_weights)

    def pos(self, idx):
        return _gather(self.encoder.pos_embed.expand(idx.shape[0], -1, -1), idx)

    def regress_masked(self, visible_feats, mask):
        """Predict masked-patch representations Z_m from visible ones."""
        vis_idx, msk_idx = _rows(~mask), _rows(mask)
        if visible_feats.shape[1] != vis_idx.shape[1]:
            raise ValueError("visible representation count does not match the plan")
        return self.regressor(visible_feats, self.pos(vis_idx), self.pos(msk_idx))

    @torch.no_grad()
    def target_reps(self, patches, mask):
        """Encoder representations of the masked patches, gradient-blocked."""
        msk_idx = _rows(mask)
        if self.mim.target_mode == "masked_set":
            feats = self.encoder(patches, ~mask)
        else:
            feats = self.encoder(patches)
        return _gather(feats, msk_idx).detach()

    def forward(self, images, mask) -> tuple[LossReport, dict]:
        patches = patchify(images, self.cfg.patch_width)
        vis_idx, msk_idx = _rows(~mask), _rows(mask)
        feats = self.encoder(patches, mask)
        f_v = _gather(feats, vis_idx)
        z_m = self.regressor(f_v, self.pos(vis_idx), self.pos(msk_idx))
        t_m = self.pixel_decoder(z_m, self.pos(msk_idx))
        z_star = self.target_reps(patches, mask)
        t_star = patch_pixel_target(_gather(patches, msk_idx))
        report = mim_loss(t_m, t_star, z_m, z_star, self.mim.lam)
        return report, {"z_m": z_m, "t_m": t_m, "z_star": z_star, "t_star": t_star}

    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {"encoder." + k: v.detach().clone() for k, v in self.encoder.state_dict().items()}

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        params = self.encoder_state()
        for name, mod in (("regressor", self.regressor), ("pixel_decoder", self.pixel_decoder)):
            params.update({f"mim.{name}.{k}": v.detach().clone() for k, v in mod.state_dict().items()})
        return Checkpoint(self.cfg.to_dict(), params, "visual_pretrain", {"torch": torch.get_rng_state()},
                          None, dict(extra or {}, mim=asdict(self.mim)))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MIMPretrainer":
        m = cls(ckpt.model_config, MIMConfig.from_dict(ckpt.extra.get("mim")))
        state = {}
        for k, v in ckpt.params.items():
            if k.startswith("encoder."):
                state[k] = v
            elif k.startswith("mim."):
                state[k[4:]] = v
        m.load_state_dict(state)
        return m


def pretrain_encoder(cfg: ModelConfig, images: torch.Tensor, stage: StageConfig | None = None,
                     mim: MIMConfig | None = None, seed: int = 0, log_path=None,
                     pretrainer: MIMPretrainer | None = None) -> tuple[Checkpoint, MIMPretrainer, JsonlLog]:
    """Minimize the masked-image objective over unlabeled ``images`` (B, C, H, W).

    The learning rate defaults to ``base_lr * batch_size / 256``.
    """
    stage = stage or StageConfig(epochs=1, batch_size=64, base_lr=1.5e-4)
    seed_everything(seed)
    model = pretrainer or MIMPretrainer(cfg, mim)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    steps_per_epoch = max(1, -(-n // stage.batch_size))
    peak = stage.lr if stage.lr is not None else lr_scaled(stage.base_lr or 1.5e-4, stage.batch_size)
    sched = Schedule(peak, steps_per_epoch, stage.epochs, stage.warmup_epochs, stage.min_lr)
    opt = make_optimizer(model.named_parameters(), stage, peak)
    log = JsonlLog(log_path)
    model.train()
    step = 0
    epoch = 0
    while step < sched.total:
        totals = {"loss_total": 0.0, "loss_pixel": 0.0, "loss_align": 0.0}
        nb = 0
        for idx in iterate_batches(n, stage.batch_size, rng):
            if step >= sched.total:
                break
            lr = sched.apply(opt, step)
            batch = images[torch.from_numpy(idx)]
            mask = batch_mask(len(idx), cfg.num_patches, model.mim.mask_ratio, rng)
            report, _ = model(batch, mask)
            check_finite(report.total, "pretrain_visual", step, report.components)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if stage.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), stage.grad_clip)
            opt.step()
            log.write(stage="pretrain_visual", epoch=epoch, step=step, loss_total=report.item(),
                      loss_pixel=report.components["loss_pixel"], loss_align=report.components["loss_align"],
                      lr=lr)
            totals["loss_total"] += report.item()
            totals["loss_pixel"] += report.components["loss_pixel"]
            totals["loss_align"] += report.components["loss_align"]
            nb += 1
            step += 1
        log.write(stage="pretrain_visual", epoch=epoch, summary=True,
                  **{k: v / max(nb, 1) for k, v in totals.items()})
        epoch += 1
    model.eval()
    ckpt = model.checkpoint({"seed": seed, "stage_config": stage.to_dict(), "steps": step})
    return ckpt, model, log


def mim_sanity(cfg: ModelConfig, images: torch.Tensor, steps: int = 50, lr: float = 0.05, seed: int = 0,
               mim: MIMConfig | None = None) -> list[float]:
    """Full-batch gradient descent on one fixed batch and mask; returns the loss trajectory."""
    seed_everything(seed)
    cfg = ModelConfig.from_dict(dict(cfg.to_dict(), drop_path_rate=0.0))
    model = MIMPretrainer(cfg, mim).double()
    model.train()
    images = images.double()
    mask = batch_mask(images.shape[0], cfg.num_patches, model.mim.mask_ratio, np.random.default_rng(seed))
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    losses = []
    for _ in range(steps + 1):
        report, _ = model(images, mask)
        losses.append(report.item())
        opt.zero_grad()
        report.total.backward()
        opt.step()
    return losses


@torch.no_grad()
def reconstruct(model: MIMPretrainer, images: torch.Tensor, mask: torch.Tensor, fill: float = 0.5):
    """Return (input, masked input, reconstruction) image tensors.

    Predicted normalized pixels are mapped back with each true patch's
    mean and std; visible patches are copied from the input.
    """
    model.eval()
    cfg = model.cfg
    _, parts = model(images, mask)
    patches = patchify(images, cfg.patch_width)
    msk_idx = _rows(mask)
    true = _gather(patches, msk_idx)
    mean = true.mean(-1, keepdim=True)
    std = (true - mean).pow(2).mean(-1, keepdim=True).sqrt()
    pred = (parts["t_m"] * (std + 1e-6) + mean).clamp(0, 1)
    masked_patches = patches.clone()
    masked_patches[mask] = fill
    recon = patches.clone()
    recon.scatter_(1, msk_idx[..., None].expand(-1, -1, patches.shape[-1]), pred)
    C, H = cfg.channels, cfg.img_h
    return images, unpatchify(masked_patches, C, H), unpatchify(recon, C, H)


def save_triptych(images, masked, recon, path, scale: int = 2) -> Path:
    """Tile input / masked / reconstruction vertically for each sample, samples side by side."""
    from PIL import Image

    cols = []
    for a, b, c in zip(images, masked, recon):
        col = torch.cat([a, b, c], dim=1)  # stack along height
        cols.append(torch.nn.functional.pad(col, (0, 2), value=1.0))
    grid = torch.cat(cols, dim=2).clamp(0, 1)
    arr = (grid.numpy() * 255).round().astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    img = Image.fromarray(arr)
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
