"""Masked image-language pretraining of the decoder on synthetic text images.

Whole characters are hidden by masking every patch their box touches; the
encoder (frozen by default) sees only the remaining patches, hidden rows are
replaced by zeros, and the decoder must predict the hidden characters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint, load_into, snapshot, tensor_hash
from .data import TextDataset, char_boxes_to_patch_indices, iterate_batches
from .losses import ctc_loss, masked_char_loss
from .model import MaskOCR, ModelConfig, patchify
from .training import JsonlLog, Schedule, StageConfig, check_finite, make_optimizer, seed_everything


class EncoderDriftError(RuntimeError):
    pass


@dataclass
class CharMaskPlan:
    masked_chars: np.ndarray
    masked_patches: np.ndarray
    visible_patches: np.ndarray
    M: int

    def patch_mask(self) -> np.ndarray:
        m = np.zeros(self.M, dtype=bool)
        m[self.masked_patches] = True
        return m


def num_masked_chars(L: int, ratio: float) -> int:
    # half-up rounding of ratio * L, at least one
    return max(1, int(np.floor(ratio * L + 0.5 + 1e-9)))


def sample_char_mask(L: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if L < 1:
        raise ValueError("need at least one character")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    k = min(L, num_masked_chars(L, ratio))
    return np.sort(rng.choice(L, size=k, replace=False))


def char_mask_plan(boxes, masked_chars, patch_width: int, image_width: int) -> CharMaskPlan:
    M = image_width // patch_width
    sets = char_boxes_to_patch_indices([boxes[i] for i in masked_chars], patch_width, image_width)
    masked = np.array(sorted(set().union(*sets)), dtype=np.int64)
    visible = np.setdiff1d(np.arange(M), masked)
    if visible.size == 0:
        raise ValueError("character mask hides every patch")
    return CharMaskPlan(np.asarray(masked_chars, dtype=np.int64), masked, visible, M)


def batch_char_masks(dataset: TextDataset, idx, ratio: float, patch_width: int, image_width: int,
                     N: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch masks (B, M) and character masks (B, N) for the samples ``idx``."""
    M = image_width // patch_width
    pmask = np.zeros((len(idx), M), dtype=bool)
    cmask = np.zeros((len(idx), N), dtype=bool)
    for j, i in enumerate(idx):
        L = int(dataset.lengths[i])
        chars = sample_char_mask(L, ratio, rng)
        plan = char_mask_plan(dataset.boxes[i], chars, patch_width, image_width)
        pmask[j] = plan.patch_mask()
        cmask[j, chars] = True
    return torch.from_numpy(pmask), torch.from_numpy(cmask)


def masked_encode(model: MaskOCR, images: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Encoder output under masked attention with hidden rows set to zero (positions not yet added)."""
    patches = patchify(images, model.cfg.patch_width)
    if patch_mask.shape[-1] != patches.shape[-2]:
        raise ValueError(f"mask covers {patch_mask.shape[-1]} patches, image has {patches.shape[-2]}")
    feats = model.encoder(patches, patch_mask)
    return feats.masked_fill(patch_mask[..., None], 0.0)


def _decoder_logits(model: MaskOCR, images, patch_mask, frozen: bool):
    if frozen:
        with torch.no_grad():
            feats = masked_encode(model, images, patch_mask)
    else:
        feats = masked_encode(model, images, patch_mask)
    return model.decoder(model.memory(feats))


def _run(cfg: ModelConfig, encoder_ckpt: Checkpoint | None, dataset: TextDataset, stage: StageConfig,
         mask_ratio: float, seed: int, freeze_encoder: bool, log_path, objective: str):
    seed_everything(seed)
    model = MaskOCR(cfg)
    if encoder_ckpt is not None:
        load_into(model, encoder_ckpt, ("encoder.",))
        parent = encoder_ckpt
    else:
        parent = snapshot(model, "init")
    enc_before = tensor_hash({k: v for k, v in model.state_dict().items() if k.startswith("encoder.")})
    if freeze_encoder:
        model.encoder.requires_grad_(False)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    steps_per_epoch = max(1, -(-n // stage.batch_size))
    peak = stage.lr if stage.lr is not None else 1e-4
    sched = Schedule(peak, steps_per_epoch, stage.epochs, stage.warmup_epochs, stage.min_lr)
    opt = make_optimizer(model.named_parameters(), stage, peak)
    log = JsonlLog(log_path)
    name = "pretrain_language" if objective == "masked_char" else "pretrain_language_ctc"
    step = epoch = 0
    while step < sched.total:
        model.train()
        if freeze_encoder:
            model.encoder.eval()
        for idx in iterate_batches(n, stage.batch_size, rng):
            if step >= sched.total:
                break
            lr = sched.apply(opt, step)
            pmask, cmask = batch_char_masks(dataset, idx, mask_ratio, cfg.patch_width, cfg.img_w,
                                            dataset.labels.shape[1], rng)
            t = torch.from_numpy(idx)
            images, labels = dataset.images[t], dataset.labels[t]
            logits = _decoder_logits(model, images, pmask, freeze_encoder)
            if objective == "masked_char":
                report = masked_char_loss(logits, labels, cmask)
                loss, comps = report.total, report.components
            else:
                lengths = dataset.lengths[t]
                loss = ctc_loss(logits, labels, blank=cfg.vocab_size, target_lengths=lengths)
                comps = {"ctc": float(loss.detach())}
            check_finite(loss, name, step, comps)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if stage.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), stage.grad_clip)
            opt.step()
            log.write(stage=name, epoch=epoch, step=step, loss_total=float(loss.detach()), lr=lr, **comps)
            step += 1
        epoch += 1
    model.eval()
    enc_after = tensor_hash({k: v for k, v in model.state_dict().items() if k.startswith("encoder.")})
    if freeze_encoder and (enc_after != enc_before or enc_after != parent.group_hash("encoder.")):
        raise EncoderDriftError("encoder parameters changed while frozen")
    ckpt = snapshot(model, "language_pretrain", parent,
                    {"seed": seed, "stage_config": stage.to_dict(), "mask_ratio": mask_ratio,
                     "freeze_encoder": freeze_encoder, "objective": objective, "steps": step,
                     "encoder_hash": enc_after})
    return ckpt, model, log


def pretrain_decoder(cfg: ModelConfig, encoder_ckpt: Checkpoint | None, dataset: TextDataset,
                     stage: StageConfig | None = None, mask_ratio: float = 0.15, seed: int = 0,
                     freeze_encoder: bool = True, log_path=None):
    """Optimize the query decoder on the masked-character loss.

    ``encoder_ckpt=None`` starts from a randomly initialized encoder (the
    language-only ablation).  With ``freeze_encoder=False`` the encoder is
    trained too (the retrain-encoder ablation).
    """
    if cfg.head != "query":
        raise ValueError("pretrain_decoder needs the query head")
    stage = stage or StageConfig(epochs=5, batch_size=64, lr=1e-4)
    return _run(cfg, encoder_ckpt, dataset, stage, mask_ratio, seed, freeze_encoder, log_path, "masked_char")


def pretrain_decoder_ctc(cfg: ModelConfig, encoder_ckpt: Checkpoint | None, dataset: TextDataset,
                         stage: StageConfig | None = None, mask_ratio: float = 0.15, seed: int = 0,
                         freeze_encoder: bool = True, log_path=None):
    """Same masking pipeline; the CTC head predicts the whole transcription."""
    if cfg.head != "ctc":
        raise ValueError("pretrain_decoder_ctc needs the ctc head")
    stage = stage or StageConfig(epochs=5, batch_size=64, lr=1e-4)
    return _run(cfg, encoder_ckpt, dataset, stage, mask_ratio, seed, freeze_encoder, log_path, "ctc")


@torch.no_grad()
def masked_char_accuracy(model: MaskOCR, dataset: TextDataset, mask_ratio: float = 0.15, seed: int = 0,
                         batch_size: int = 256) -> float:
    model.eval()
    rng = np.random.default_rng(seed)
    correct = total = 0
    cfg = model.cfg
    for idx in iterate_batches(len(dataset), batch_size, None):
        pmask, cmask = batch_char_masks(dataset, idx, mask_ratio, cfg.patch_width, cfg.img_w,
                                        dataset.labels.shape[1], rng)
        t = torch.from_numpy(idx)
        logits = _decoder_logits(model, dataset.images[t], pmask, True)
        pred = logits.argmax(-1)
        correct += int(((pred == dataset.labels[t]) & cmask).sum())
        total += int(cmask.sum())
    return correct / max(total, 1)
