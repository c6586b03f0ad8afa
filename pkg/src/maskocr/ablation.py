"""Desk-scale ablation grids: toy data, cached stage products, aggregated reports."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import TextDataset, Vocab
from .finetune import EvalReport, aggregate, evaluate, finetune, linear_probe, random_checkpoint
from .model import ModelConfig
from .pretrain_language import pretrain_decoder, pretrain_decoder_ctc
from .pretrain_visual import MIMConfig, pretrain_encoder
from .synth import Canvas, StyleRanges, generate_samples, procedural_fonts, twin_bigram_corpus
from .training import StageConfig

# Large-scale reference accuracies, carried as annotations only.
REFERENCE_ACCURACY = {
    "vl_table": {"Scratch": 75.8, "V": 79.8, "L": 77.7, "V+L": 80.8},
    "freeze_table": {"Scratch": 75.8, "Retrain encoder": 76.7, "Fix encoder": 80.8},
    "mask_ratio_sweep": {"V@0.30": 79.3, "V@0.45": 79.8, "V@0.60": 79.4},
    "lang_mask_table": {"-M -V": 76.1, "+M -V": 77.7, "-M +V": 80.5, "+M +V": 80.8},
    "patch_size": {"32x4": 75.8, "32x8": 72.2},
    "ctc_generalizability": {"CTC Scratch": 76.7, "CTC V+L": 80.1},
    "linear_probe": {"V+L": 47.8},
}

SUITES = tuple(k for k in REFERENCE_ACCURACY)


def _stage(epochs, batch_size, lr, base_lr=None, weight_decay=0.05, warmup_epochs=0.5) -> dict:
    return {"epochs": epochs, "batch_size": batch_size, "lr": lr, "base_lr": base_lr,
            "weight_decay": weight_decay, "warmup_epochs": warmup_epochs, "min_lr": 0.0, "grad_clip": None,
            "betas": (0.9, 0.999)}


@dataclass
class ToySetup:
    """Everything that defines the toy world and the training budgets."""

    alphabet: str = "abcdefghijklmnop"
    length_range: tuple[int, int] = (3, 7)
    canvas: tuple[int, int, int] = (1, 16, 80)
    glyph_height: int = 10
    glyph_widths: tuple[int, int] = (6, 8)
    twin_flips: int = 3
    n_fonts: int = 2
    font_seed: int = 11
    num_queries: int = 8
    corpus_fanout: int = 2
    real_style: dict = field(default_factory=lambda: {
        "bg_level": (0.6, 0.9), "fg_level": (0.1, 0.4), "noise_sigma": (0.03, 0.08),
        "spacing_px": (0, 2), "margin_px": (0, 4), "min_contrast": 0.3})
    synth_style: dict = field(default_factory=lambda: {
        "bg_level": (0.85, 1.0), "fg_level": (0.0, 0.15), "noise_sigma": (0.0, 0.02),
        "spacing_px": (1, 3), "margin_px": (0, 4), "min_contrast": 0.5})
    n_visual: int = 4000
    n_language: int = 4000
    n_finetune: int = 1000
    n_val: int = 200
    n_test: int = 500
    data_seed: int = 1234
    model: dict = field(default_factory=lambda: {
        "patch_width": 4, "enc_dim": 64, "enc_heads": 4, "enc_layers": 3, "dec_dim": 64, "dec_heads": 4,
        "dec_layers": 2, "mlp_ratio": 2.0, "drop_path_rate": 0.1, "ctc_layers": 2, "head": "query",
        "pos_init": "sincos"})
    mim: dict = field(default_factory=lambda: {"mask_ratio": 0.45, "lam": 0.05, "regressor_layers": 2,
                                               "decoder_layers": 2, "target_mode": "masked_set"})
    visual_stage: dict = field(default_factory=lambda: _stage(40, 64, 1.5e-3, base_lr=1.5e-4, warmup_epochs=1.0))
    char_mask_ratio: float = 0.15
    language_stage: dict = field(default_factory=lambda: _stage(20, 64, 2e-3))
    finetune_stage: dict = field(default_factory=lambda: _stage(80, 32, None))
    finetune_lr_scratch: float = 1e-3
    finetune_lr_pretrained: float = 1e-3
    probe_stage: dict = field(default_factory=lambda: _stage(20, 32, 3e-3, weight_decay=0.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ToySetup":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in (d or {}).items() if k in names}
        for k in ("length_range", "canvas", "glyph_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.alphabet)

    def model_config(self, **over) -> ModelConfig:
        C, H, W = self.canvas
        d = dict(self.model, channels=C, img_h=H, img_w=W, num_queries=self.num_queries,
                 vocab_size=self.vocab.size)
        d.update(over)
        return ModelConfig.from_dict(d)


@dataclass
class ToyData:
    visual: torch.Tensor
    language: TextDataset
    finetune: TextDataset
    val: TextDataset
    test: TextDataset


def toy_world(setup: ToySetup):
    """Corpus, fonts, real/synthetic style ranges and canvas of the toy world."""
    C, H, W = setup.canvas
    fonts = procedural_fonts(setup.alphabet, setup.n_fonts, setup.font_seed, height=setup.glyph_height,
                             width_range=setup.glyph_widths, twin_flips=setup.twin_flips,
                             baseline=(H + setup.glyph_height) // 2)
    corpus = twin_bigram_corpus(setup.alphabet, setup.length_range, setup.corpus_fanout)
    real = StyleRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in setup.real_style.items()})
    synth = StyleRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in setup.synth_style.items()})
    return corpus, fonts, real, synth, Canvas(C, H, W)


def build_toy_data(setup: ToySetup, patch_width: int | None = None) -> ToyData:
    """Render all toy splits in memory. Each split uses its own derived seed."""
    _, H, W = setup.canvas
    pw = patch_width or setup.model["patch_width"]
    corpus, fonts, real, synth, canvas = toy_world(setup)
    vocab = setup.vocab

    def ds(style, n, tag):
        seed = int(np.random.SeedSequence([setup.data_seed, tag]).generate_state(1)[0])
        samples = generate_samples(corpus, fonts, style, canvas, n, seed)
        return TextDataset.from_samples(samples, vocab, setup.num_queries, "word", (H, W), pw)

    visual = ds(real, setup.n_visual, 1).images
    return ToyData(visual, ds(synth, setup.n_language, 2), ds(real, setup.n_finetune, 3),
                   ds(real, setup.n_val, 4), ds(real, setup.n_test, 5))


@dataclass
class ExperimentSpec:
    stages: list[str]
    init: str = "scratch"
    datasets: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    overrides: dict = field(default_factory=dict)

    VALID = ("pretrain_visual", "pretrain_language", "finetune", "linear_probe", "eval")

    def __post_init__(self):
        bad = [s for s in self.stages if s not in self.VALID]
        if bad:
            raise ValueError(f"unknown stages {bad}")
        if "pretrain_language" in self.stages and "pretrain_visual" not in self.stages \
                and self.init == "scratch" and not self.overrides.get("allow_language_only", False):
            raise ValueError("language pretraining needs a visual-pretrain parent "
                             "(set overrides.allow_language_only for the L-only row)")


class AblationRunner:
    """Runs grid cells, memoizing pretraining products so rows share them."""

    def __init__(self, setup: ToySetup | None = None, out_dir=None, verbose: bool = False):
        self.setup = setup or ToySetup()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.verbose = verbose
        self._data: dict = {}
        self._ckpts: dict = {}
        self._results: dict = {}
        self.timings: dict[str, float] = {}

    def log(self, msg):
        if self.verbose:
            print(msg, flush=True)

    def data(self, patch_width: int | None = None) -> ToyData:
        pw = patch_width or self.setup.model["patch_width"]
        if pw not in self._data:
            self._data[pw] = build_toy_data(self.setup, pw)
        return self._data[pw]

    def _timed(self, key, fn):
        t = time.time()
        out = fn()
        self.timings[key] = time.time() - t
        self.log(f"  {key}: {self.timings[key]:.1f}s")
        return out

    def visual(self, seed: int, ratio: float | None = None, patch_width: int | None = None) -> Checkpoint:
        s = self.setup
        ratio = s.mim["mask_ratio"] if ratio is None else ratio
        key = ("V", seed, ratio, patch_width)
        if key not in self._ckpts:
            cfg = s.model_config(**({"patch_width": patch_width} if patch_width else {}))
            mim = MIMConfig.from_dict(dict(s.mim, mask_ratio=ratio))
            self._ckpts[key] = self._timed(str(key), lambda: pretrain_encoder(
                cfg, self.data(patch_width).visual, StageConfig.from_dict(s.visual_stage), mim,
                seed=seed + 100)[0])
        return self._ckpts[key]

    def language(self, seed: int, parent: str, freeze: bool = True, objective: str = "masked",
                 head: str = "query") -> Checkpoint:
        """``parent`` is "V" (visual checkpoint) or "none" (random encoder)."""
        s = self.setup
        key = ("L", seed, parent, freeze, objective, head)
        if key not in self._ckpts:
            enc = self.visual(seed) if parent == "V" else None
            cfg = s.model_config(head=head)
            stage = StageConfig.from_dict(s.language_stage)
            ds = self.data().language
            if head == "ctc":
                fn = lambda: pretrain_decoder_ctc(cfg, enc, ds, stage, s.char_mask_ratio, seed + 200, freeze)[0]
            elif objective == "masked":
                fn = lambda: pretrain_decoder(cfg, enc, ds, stage, s.char_mask_ratio, seed + 200, freeze)[0]
            else:
                fn = lambda: _pretrain_decoder_unmasked(cfg, enc, ds, stage, seed + 200)
            self._ckpts[key] = self._timed(str(key), fn)
        return self._ckpts[key]

    def finetune_eval(self, name: str, seed: int, init: Checkpoint | None, head: str = "query",
                      patch_width: int | None = None) -> float:
        s = self.setup
        key = (name, seed, head, patch_width)
        if key not in self._results:
            over = {"head": head}
            if patch_width:
                over["patch_width"] = patch_width
            cfg = s.model_config(**over)
            d = self.data(patch_width)
            lr = s.finetune_lr_scratch if init is None else s.finetune_lr_pretrained
            stage = StageConfig.from_dict(dict(s.finetune_stage, lr=lr))
            ckpt, _, model, _ = self._timed(f"finetune {key}", lambda: finetune(
                cfg, init, d.finetune, s.vocab, d.val, stage, seed + 300))
            self._results[key] = evaluate(model, d.test, s.vocab).accuracy
            self.log(f"  {name} seed {seed}: test acc {self._results[key]:.4f}")
        return self._results[key]

    def probe_eval(self, name: str, seed: int, ckpt: Checkpoint) -> float:
        s = self.setup
        key = ("probe", name, seed)
        if key not in self._results:
            d = self.data()
            _, _, model, _ = self._timed(f"probe {key}", lambda: linear_probe(
                ckpt, d.finetune, s.vocab, d.val, StageConfig.from_dict(s.probe_stage), seed + 400))
            self._results[key] = evaluate(model, d.test, s.vocab).accuracy
            self.log(f"  probe {name} seed {seed}: test acc {self._results[key]:.4f}")
        return self._results[key]

    def cell(self, suite: str, row: str, seed: int) -> float:
        s = self.setup
        if suite == "vl_table":
            init = {"Scratch": lambda: None, "V": lambda: self.visual(seed),
                    "L": lambda: self.language(seed, "none"), "V+L": lambda: self.language(seed, "V")}[row]()
            return self.finetune_eval(row, seed, init)
        if suite == "freeze_table":
            init = {"Scratch": lambda: None,
                    "Retrain encoder": lambda: self.language(seed, "V", freeze=False),
                    "Fix encoder": lambda: self.language(seed, "V")}[row]()
            name = {"Scratch": "Scratch", "Fix encoder": "V+L"}.get(row, row)
            return self.finetune_eval(name, seed, init)
        if suite == "mask_ratio_sweep":
            ratio = float(row.split("@")[1])
            return self.finetune_eval(row if ratio != s.mim["mask_ratio"] else "V", seed,
                                      self.visual(seed, ratio))
        if suite == "lang_mask_table":
            masked, vis = row.startswith("+M"), row.endswith("+V")
            init = self.language(seed, "V" if vis else "none", objective="masked" if masked else "unmasked")
            name = {"+M -V": "L", "+M +V": "V+L"}.get(row, row)
            return self.finetune_eval(name, seed, init)
        if suite == "patch_size":
            pw = int(row.split("x")[1])
            return self.finetune_eval("Scratch", seed, None, patch_width=None if pw == s.model["patch_width"] else pw)
        if suite == "ctc_generalizability":
            if row == "CTC Scratch":
                return self.finetune_eval(row, seed, None, head="ctc")
            return self.finetune_eval(row, seed, self.language(seed, "V", head="ctc"), head="ctc")
        if suite == "linear_probe":
            if row == "V+L":
                return self.probe_eval(row, seed, self.language(seed, "V"))
            return self.probe_eval(row, seed, random_checkpoint(s.model_config(), seed + 500))
        raise ValueError(f"unknown suite {suite!r}")

    def rows(self, suite: str) -> list[str]:
        if suite == "patch_size":
            H = self.setup.canvas[1]
            return [f"{H}x{self.setup.model['patch_width']}", f"{H}x{2 * self.setup.model['patch_width']}"]
        if suite == "linear_probe":
            return ["Random", "V+L"]
        return list(REFERENCE_ACCURACY[suite])

    def run(self, suite: str, seeds=(0, 1, 2)) -> dict:
        """Run one suite; returns {row: EvalReport} and writes reports if ``out_dir`` is set."""
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
        self.log(f"suite {suite}")
        results: dict[str, EvalReport] = {}
        try:
            for row in self.rows(suite):
                reps = [EvalReport(self.cell(suite, row, seed), len(self.data().test)) for seed in seeds]
                results[row] = aggregate(reps)
        finally:
            if self.out_dir is not None:
                write_report(self.out_dir, suite, results, self.setup, list(seeds))
        return results


def _pretrain_decoder_unmasked(cfg, enc, ds, stage, seed) -> Checkpoint:
    """Language pretraining without masking: recognize every character of the synthetic image."""
    from .checkpoint import load_into, snapshot, tensor_hash
    from .data import iterate_batches
    from .losses import recognition_loss
    from .model import MaskOCR
    from .training import Schedule, make_optimizer, seed_everything

    seed_everything(seed)
    model = MaskOCR(cfg)
    parent = enc if enc is not None else snapshot(model, "init")
    if enc is not None:
        load_into(model, enc, ("encoder.",))
    before = tensor_hash({k: v for k, v in model.state_dict().items() if k.startswith("encoder.")})
    model.encoder.requires_grad_(False)
    rng = np.random.default_rng(seed)
    n = len(ds)
    spe = max(1, -(-n // stage.batch_size))
    peak = stage.lr if stage.lr is not None else 1e-4
    sched = Schedule(peak, spe, stage.epochs, stage.warmup_epochs, stage.min_lr)
    opt = make_optimizer(model.named_parameters(), stage, peak)
    step = 0
    while step < sched.total:
        model.train()
        model.encoder.eval()
        for idx in iterate_batches(n, stage.batch_size, rng):
            if step >= sched.total:
                break
            sched.apply(opt, step)
            t = torch.from_numpy(idx)
            with torch.no_grad():
                feats = model.encode(ds.images[t])
            loss = recognition_loss(model.decode(feats), ds.labels[t], ds.lengths[t]).total
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    after = tensor_hash({k: v for k, v in model.state_dict().items() if k.startswith("encoder.")})
    assert before == after
    return snapshot(model.eval(), "language_pretrain", parent, {"objective": "unmasked", "seed": seed})


def write_report(out_dir, suite: str, results: dict, setup: ToySetup, seeds: list[int]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = {"suite": suite, "seeds": seeds, "setup": setup.to_dict(), "setup_hash": setup.content_hash()}
    path = out / f"{suite}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"record": "spec", **spec}, sort_keys=True) + "\n")
        for row, rep in results.items():
            fh.write(json.dumps({"record": "row", "suite": suite, "row": row, "mean": rep.mean, "std": rep.std,
                                 "per_seed": rep.per_seed, "count": rep.count,
                                 "reference": REFERENCE_ACCURACY.get(suite, {}).get(row)}, sort_keys=True) + "\n")
    lines = [f"{suite}  (setup {setup.content_hash()}, seeds {seeds})",
             f"{'row':<18}{'mean':>8}{'std':>8}  per-seed{'':<14}reference"]
    for row, rep in results.items():
        ref = REFERENCE_ACCURACY.get(suite, {}).get(row)
        lines.append(f"{row:<18}{rep.mean:>8.4f}{rep.std:>8.4f}  "
                     f"{' '.join(f'{a:.3f}' for a in rep.per_seed):<22}{'' if ref is None else ref}")
    (out / f"{suite}_summary.txt").write_text("\n".join(lines) + "\n")
    if results:
        plot_suite(out / f"{suite}.png", suite, results)
    return path


def plot_suite(path, suite: str, results: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(results)
    fig, ax = plt.subplots(figsize=(1.4 * len(rows) + 1.5, 3))
    ax.bar(rows, [results[r].mean for r in rows], yerr=[results[r].std for r in rows], capsize=4,
           color="#5b8db8")
    ax.set_ylabel("test sequence accuracy")
    ax.set_title(suite)
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
