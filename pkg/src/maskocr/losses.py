"""Training objectives: recognition CE, masked-patch regression, masked-character CE, CTC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


class LossInputError(ValueError):
    pass


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    counted_positions: int = 0

    def item(self) -> float:
        return float(self.total.detach())


def _as_batch(logits, ids, lengths):
    if logits.dim() == 2:
        logits = logits[None]
        ids = torch.as_tensor(ids)[None]
        lengths = torch.as_tensor([lengths])
    return logits, torch.as_tensor(ids, device=logits.device), torch.as_tensor(lengths, device=logits.device)


def recognition_loss(logits: torch.Tensor, ids, lengths) -> LossReport:
    """Cross-entropy over each label's characters plus its first EOS.

    Per sample the CE is averaged over positions ``0..L`` (L+1 positions);
    the batch loss is the mean of the per-sample losses.  Rows after the
    first EOS contribute neither loss nor gradient.
    """
    logits, ids, lengths = _as_batch(logits, ids, lengths)
    B, N, V = logits.shape
    if (lengths >= N).any():
        raise LossInputError(f"label length must be <= N-1={N - 1} to fit the EOS")
    pos = torch.arange(N, device=logits.device)
    counted = pos[None, :] <= lengths[:, None]
    ce = F.cross_entropy(logits.reshape(-1, V), ids.reshape(-1), reduction="none").view(B, N)
    ce = torch.where(counted, ce, torch.zeros_like(ce))
    per_sample = ce.sum(dim=1) / (lengths + 1).to(ce.dtype)
    total = per_sample.mean()
    return LossReport(total, {"ce": float(total.detach())}, int(counted.sum()))


def patch_pixel_target(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Standardize each patch vector (last dim): (x - mean) / (std + eps)."""
    if patches.shape[-1] < 2:
        raise LossInputError("patch needs at least 2 pixels")
    # float64 makes a constant patch center to exactly zero
    x = patches.double()
    centered = x - x.mean(dim=-1, keepdim=True)
    std = centered.pow(2).mean(dim=-1, keepdim=True).sqrt()
    return (centered / (std + eps)).to(patches.dtype)


def mim_loss(pred_pixels, target_pixels, pred_latent, target_latent, lam: float = 0.05) -> LossReport:
    """Pixel MSE plus ``lam`` times latent-alignment MSE over masked patches.

    Both MSEs average over all elements.  ``target_latent`` is detached.
    """
    if pred_pixels.shape != target_pixels.shape or pred_latent.shape != target_latent.shape:
        raise LossInputError("prediction/target shapes differ")
    if pred_pixels.numel() == 0 or pred_latent.numel() == 0:
        raise LossInputError("no masked patches")
    loss_pixel = F.mse_loss(pred_pixels, target_pixels)
    loss_align = F.mse_loss(pred_latent, target_latent.detach())
    total = loss_pixel + lam * loss_align
    return LossReport(total, {"loss_pixel": float(loss_pixel.detach()),
                              "loss_align": float(loss_align.detach())},
                      int(pred_pixels.shape[-2] * (pred_pixels.shape[0] if pred_pixels.dim() > 2 else 1)))


def masked_char_loss(logits: torch.Tensor, ids, masked) -> LossReport:
    """Cross-entropy over masked character positions only.

    ``masked`` is a boolean (B, N) tensor, or for a single (N, V) logit
    matrix an index collection.  Per sample the CE is averaged over its
    masked positions; samples are then averaged.
    """
    if logits.dim() == 2:
        N = logits.shape[0]
        m = torch.zeros(N, dtype=torch.bool, device=logits.device)
        idx = torch.as_tensor(sorted(masked) if not torch.is_tensor(masked) else masked, dtype=torch.long)
        if idx.dtype == torch.bool:
            m = idx
        else:
            m[idx] = True
        logits, ids, masked = logits[None], torch.as_tensor(ids)[None], m[None]
    B, N, V = logits.shape
    masked = masked.to(torch.bool)
    counts = masked.sum(dim=1)
    if (counts == 0).any():
        raise LossInputError("a sample has no masked characters")
    ce = F.cross_entropy(logits.reshape(-1, V), torch.as_tensor(ids).reshape(-1), reduction="none").view(B, N)
    ce = torch.where(masked, ce, torch.zeros_like(ce))
    total = (ce.sum(dim=1) / counts.to(ce.dtype)).mean()
    return LossReport(total, {"ce_masked": float(total.detach())}, int(counts.sum()))


def ctc_min_frames(target) -> int:
    """Frames needed to emit ``target``: its length plus one blank per adjacent repeat."""
    t = [int(x) for x in target]
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def ctc_loss(frame_logits: torch.Tensor, targets, blank: int, target_lengths=None,
             reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of ``targets`` under CTC, by the log-space forward recursion.

    ``frame_logits`` is (M, V+1) for one sequence with ``targets`` a list of
    ids, or (B, M, V+1) with padded (B, L) targets and ``target_lengths``.
    """
    single = frame_logits.dim() == 2
    if single:
        frame_logits = frame_logits[None]
        targets = [list(int(t) for t in targets)]
        target_lengths = [len(targets[0])]
    B, M, _ = frame_logits.shape
    if target_lengths is None:
        target_lengths = [len(t) for t in targets]
    target_lengths = [int(x) for x in target_lengths]
    tl = [list(int(x) for x in targets[b][:target_lengths[b]]) for b in range(B)]
    for b, t in enumerate(tl):
        if any(x == blank for x in t):
            raise LossInputError("target contains the blank id")
        if ctc_min_frames(t) > M:
            raise LossInputError(f"target of length {len(t)} needs {ctc_min_frames(t)} frames, have {M}")

    logp = frame_logits.log_softmax(dim=-1)
    Lmax = max(target_lengths) if target_lengths else 0
    S = 2 * Lmax + 1
    ext = torch.full((B, S), blank, dtype=torch.long, device=logp.device)
    for b, t in enumerate(tl):
        if t:
            ext[b, 1:2 * len(t):2] = torch.tensor(t, dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool, device=logp.device)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    # finite stand-in for log(0): keeps logsumexp gradients defined on unreachable states
    neg_inf = torch.tensor(-1e30, dtype=logp.dtype, device=logp.device)

    emit = torch.gather(logp, 2, ext[:, None, :].expand(B, M, S))  # (B, M, S)
    alpha = torch.full((B, S), -1e30, dtype=logp.dtype, device=logp.device)
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = emit[:, 0, 1]
    for t in range(1, M):
        a1 = torch.cat([neg_inf.expand(B, 1), alpha[:, :-1]], dim=1)
        a2 = torch.cat([neg_inf.expand(B, 2), alpha[:, :-2]], dim=1)[:, :S]
        a2 = torch.where(skip, a2, neg_inf)
        alpha = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
    ends = []
    for b in range(B):
        s_last = 2 * target_lengths[b]
        if target_lengths[b] == 0:
            ends.append(alpha[b, 0])
        else:
            ends.append(torch.logaddexp(alpha[b, s_last], alpha[b, s_last - 1]))
    nll = -torch.stack(ends)
    if single:
        return nll[0]
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.sum()
    return nll


def uniform_ce(vocab_size: int) -> float:
    return math.log(vocab_size)
