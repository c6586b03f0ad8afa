"""Supervised finetuning, sequence-level evaluation and linear probing."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_into, snapshot, tensor_hash
from .data import TextDataset, Vocab, iterate_batches, normalize_text, augment
from .losses import ctc_loss, recognition_loss
from .model import MaskOCR, ModelConfig, ctc_greedy_decode, greedy_decode
from .training import JsonlLog, Schedule, StageConfig, check_finite, make_optimizer, seed_everything

SCRATCH_LR = 1e-3
PRETRAINED_LR = 1e-4


@dataclass
class EvalReport:
    accuracy: float
    count: int
    per_dataset: dict[str, float] = field(default_factory=dict)
    per_seed: list[float] = field(default_factory=list)
    mean: float | None = None
    std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(reports: list[EvalReport]) -> EvalReport:
    accs = [r.accuracy for r in reports]
    mean = float(np.mean(accs))
    return EvalReport(mean, sum(r.count for r in reports), per_seed=accs, mean=mean,
                      std=float(np.std(accs)))


def default_lr(init: Checkpoint | None) -> float:
    return SCRATCH_LR if init is None else PRETRAINED_LR


@torch.no_grad()
def predict(model: MaskOCR, images: torch.Tensor, vocab: Vocab, batch_size: int = 256) -> list[str]:
    model.eval()
    out = []
    for i in range(0, images.shape[0], batch_size):
        logits = model(images[i:i + batch_size])
        if model.cfg.head == "query":
            out.extend(greedy_decode(logits, vocab))
        else:
            out.extend(ctc_greedy_decode(row.tolist(), vocab.blank_id, vocab) for row in logits.argmax(-1))
    return out


def evaluate(model: MaskOCR | Checkpoint, dataset: TextDataset, vocab: Vocab, lowercase: bool = True,
             strip_spaces: bool = True, subst_table: dict | None = None, name: str = "test") -> EvalReport:
    """Exact-match accuracy after normalizing predictions and ground truth alike."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(model, Checkpoint):
        model = build_model(model)
    preds = predict(model, dataset.images, vocab)
    hits = sum(normalize_text(p, lowercase, strip_spaces, subst_table) ==
               normalize_text(g, lowercase, strip_spaces, subst_table)
               for p, g in zip(preds, dataset.texts))
    acc = hits / len(dataset)
    return EvalReport(acc, len(dataset), {name: acc})


def build_model(ckpt: Checkpoint) -> MaskOCR:
    model = MaskOCR(ckpt.model_config)
    model.load_state_dict({k: v for k, v in ckpt.params.items() if not k.startswith("mim.")})
    model.eval()
    return model


def _check_vocab(init: Checkpoint | None, vocab: Vocab) -> None:
    if init is None:
        return
    chars = init.extra.get("vocab")
    if chars is not None and list(chars) != vocab.chars:
        raise CheckpointError("checkpoint vocabulary differs from the dataset vocabulary")


def finetune(cfg: ModelConfig, init: Checkpoint | None, train: TextDataset, vocab: Vocab,
             val: TextDataset | None = None, stage: StageConfig | None = None, seed: int = 0,
             log_path=None, trainable: str = "all", augment_data: bool = False,
             init_prefixes=("encoder.", "decoder."), reinit_classifier: bool = False):
    """Train on labeled data; returns (best-on-val checkpoint, val report, model, log).

    ``trainable="classifier"`` freezes everything except the final linear
    classifier (linear probing).
    """
    if cfg.vocab_size != vocab.size:
        raise CheckpointError(f"model vocab_size {cfg.vocab_size} != vocab size {vocab.size}")
    _check_vocab(init, vocab)
    stage = stage or StageConfig(epochs=10, batch_size=64)
    seed_everything(seed)
    model = MaskOCR(cfg)
    if init is not None:
        load_into(model, init, init_prefixes)
    if reinit_classifier:
        torch.manual_seed(seed)
        clf = model.decoder.classifier
        torch.nn.init.trunc_normal_(clf.weight, std=0.02)
        torch.nn.init.zeros_(clf.bias)
    if trainable == "classifier":
        model.requires_grad_(False)
        for p in model.classifier_parameters():
            p.requires_grad_(True)
    elif trainable != "all":
        raise ValueError(f"unknown trainable mode {trainable!r}")
    frozen_before = _frozen_hash(model)
    rng = np.random.default_rng(seed)
    n = len(train)
    steps_per_epoch = max(1, -(-n // stage.batch_size))
    peak = stage.lr if stage.lr is not None else default_lr(init)
    sched = Schedule(peak, steps_per_epoch, stage.epochs, stage.warmup_epochs, stage.min_lr)
    opt = make_optimizer(model.named_parameters(), stage, peak)
    log = JsonlLog(log_path)
    stage_name = "linear_probe" if trainable == "classifier" else "finetune"
    best_acc, best_state, best_epoch = -1.0, None, -1
    step = epoch = 0
    while step < sched.total:
        model.train()
        if trainable == "classifier":
            model.eval()  # frozen body runs deterministically
        running, nb = 0.0, 0
        for idx in iterate_batches(n, stage.batch_size, rng):
            if step >= sched.total:
                break
            lr = sched.apply(opt, step)
            t = torch.from_numpy(idx)
            images, labels, lengths = train.images[t], train.labels[t], train.lengths[t]
            if augment_data:
                images = augment(images, idx, seed, epoch)
            logits = model(images)
            if cfg.head == "query":
                loss = recognition_loss(logits, labels, lengths).total
            else:
                loss = ctc_loss(logits, labels, blank=vocab.blank_id, target_lengths=lengths)
            check_finite(loss, stage_name, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if stage.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), stage.grad_clip)
            opt.step()
            log.write(stage=stage_name, epoch=epoch, step=step, loss_total=float(loss.detach()), lr=lr)
            running += float(loss.detach())
            nb += 1
            step += 1
        rec = {"stage": stage_name, "epoch": epoch, "summary": True, "loss_total": running / max(nb, 1)}
        if val is not None and len(val):
            acc = evaluate(model, val, vocab, name="val").accuracy
            rec["val_accuracy"] = acc
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = copy.deepcopy(model.state_dict())
        log.write(**rec)
        epoch += 1
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if trainable == "classifier" and _frozen_hash(model) != frozen_before:
        raise RuntimeError("non-classifier parameters changed during linear probing")
    ckpt = snapshot(model, "linear_probe" if trainable == "classifier" else "finetune", init,
                    {"vocab": vocab.chars, "seed": seed, "stage_config": stage.to_dict(),
                     "best_epoch": best_epoch, "lr": peak})
    report = evaluate(model, val, vocab, name="val") if val is not None and len(val) else EvalReport(float("nan"), 0)
    return ckpt, report, model, log


def _frozen_hash(model: MaskOCR) -> str:
    return tensor_hash({k: v for k, v in model.named_parameters() if not v.requires_grad})


def linear_probe(ckpt: Checkpoint, train: TextDataset, vocab: Vocab, val: TextDataset | None = None,
                 stage: StageConfig | None = None, seed: int = 0, log_path=None):
    """Train only a freshly initialized classifier on top of a frozen encoder and decoder."""
    cfg = ckpt.model_config
    if not any(k.startswith("decoder.") for k in ckpt.params):
        raise CheckpointError("linear probing needs a checkpoint with a decoder")
    stage = stage or StageConfig(epochs=10, batch_size=64, lr=1e-3, weight_decay=0.0)
    return finetune(cfg, ckpt, train, vocab, val, stage, seed, log_path, trainable="classifier",
                    reinit_classifier=True)


def random_checkpoint(cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    seed_everything(seed)
    return snapshot(MaskOCR(cfg), "init", extra={"seed": seed})
