"""Versioned, stage-tagged parameter snapshots."""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .model import MaskOCR, ModelConfig

FORMAT_VERSION = 1
STAGES = ("init", "visual_pretrain", "language_pretrain", "finetune", "linear_probe")


class CheckpointError(ValueError):
    pass


def tensor_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module, prefix: str = "") -> str:
    return tensor_hash({k: v for k, v in module.state_dict().items() if k.startswith(prefix)})


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, torch.Tensor]
    stage: str
    rng_state: dict = field(default_factory=dict)
    parent_hash: str | None = None
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)

    def content_hash(self) -> str:
        h = hashlib.sha256(tensor_hash(self.params).encode())
        h.update(self.stage.encode())
        h.update(repr(sorted(self.config.items())).encode())
        return h.hexdigest()

    def group_hash(self, prefix: str) -> str:
        return tensor_hash({k: v for k, v in self.params.items() if k.startswith(prefix)})

    def save(self, path) -> Path:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"version": self.version, "config": self.config, "params": self.params,
                   "stage": self.stage, "rng_state": self.rng_state,
                   "parent_hash": self.parent_hash, "extra": self.extra}
        buf = io.BytesIO()
        torch.save(payload, buf)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(buf.getvalue())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        return cls(payload["config"], payload["params"], payload["stage"], payload.get("rng_state", {}),
                   payload.get("parent_hash"), payload.get("extra", {}), payload["version"])


def snapshot(model: MaskOCR, stage: str, parent: Checkpoint | None = None,
             extra: dict | None = None, aux: torch.nn.Module | None = None,
             aux_prefix: str = "mim.") -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if aux is not None:
        params.update({aux_prefix + k: v.detach().clone() for k, v in aux.state_dict().items()})
    rng = {"torch": torch.get_rng_state()}
    return Checkpoint(model.cfg.to_dict(), params, stage, rng,
                      parent.content_hash() if parent is not None else None, dict(extra or {}))


def check_compatible(cfg: ModelConfig, ckpt: Checkpoint, keys=("patch_width", "channels", "img_h", "img_w",
                                                                 "enc_dim", "enc_heads", "enc_layers")) -> None:
    other = ckpt.model_config
    bad = [k for k in keys if getattr(cfg, k) != getattr(other, k)]
    if bad:
        raise CheckpointError("config mismatch on " + ", ".join(
            f"{k} ({getattr(cfg, k)} vs {getattr(other, k)})" for k in bad))


def load_into(model: MaskOCR, ckpt: Checkpoint, prefixes=("encoder.",)) -> list[str]:
    """Copy parameters whose names start with one of ``prefixes``; returns the names loaded."""
    check_compatible(model.cfg, ckpt)
    state = model.state_dict()
    loaded = []
    for k, v in ckpt.params.items():
        if any(k.startswith(p) for p in prefixes) and k in state:
            if state[k].shape != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
            state[k] = v.clone()
            loaded.append(k)
    model.load_state_dict(state)
    return loaded
