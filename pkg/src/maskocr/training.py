"""Shared optimizer, schedule, seeding and log plumbing for all training stages."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .model import cosine_lr


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class StageConfig:
    epochs: float = 1.0
    batch_size: int = 64
    lr: float | None = None
    base_lr: float | None = None
    weight_decay: float = 0.05
    warmup_epochs: float = 0.5
    min_lr: float = 0.0
    grad_clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)

    @classmethod
    def from_dict(cls, d: dict | None) -> "StageConfig":
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def param_groups(params, weight_decay: float):
    """No decay for biases, norms and embedding-like 1-D/positional parameters."""
    decay, no_decay = [], []
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name.endswith("pos_embed") or name.endswith("queries") or name.endswith("mask_token"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(named_params, cfg: StageConfig, lr: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(param_groups(named_params, cfg.weight_decay), lr=lr, betas=cfg.betas)


class Schedule:
    """Per-step cosine decay with linear warm-up, both sized in epochs."""

    def __init__(self, peak_lr: float, steps_per_epoch: int, epochs: float, warmup_epochs: float,
                 min_lr: float = 0.0):
        self.peak = peak_lr
        self.total = max(1, int(math.ceil(steps_per_epoch * epochs)))
        self.warmup = int(round(steps_per_epoch * warmup_epochs))
        self.min_lr = min_lr

    def __call__(self, step: int) -> float:
        return cosine_lr(step, self.total, self.warmup, self.peak, self.min_lr)

    def apply(self, opt: torch.optim.Optimizer, step: int) -> float:
        lr = self(step)
        for g in opt.param_groups:
            g["lr"] = lr
        return lr


class JsonlLog:
    """Append-only line-delimited log; also keeps records in memory."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def check_finite(loss: torch.Tensor, stage: str, step: int, extra: dict | None = None) -> None:
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"{stage}: non-finite loss {float(loss)} at step {step}; {extra or {}}")
